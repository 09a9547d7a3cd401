//! Random-effect covariance: spherical parametrization, log-determinant and
//! Kronecker-structured inverse quadratic forms.
//!
//! The random-effect vector stacks one length-`R` block per active component,
//! so `Sigma = Omega (x) I_R` where `Omega` is the small `C x C` between-
//! component covariance. `Omega = D L L' D` with `D = diag(sigma)` and `L`
//! built from unconstrained spherical parameters, which keeps `Omega` positive
//! definite for every real parameter vector. Uncorrelated structures are the
//! special case `Omega = diag(sigma^2)`. Nothing here ever materializes the
//! `CR x CR` matrix.

use nalgebra::{DMatrix, DVector};

use crate::design::Component;
use crate::error::{Error, Result};

/// Correlation structure of the random effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovStructure {
    None,
    Uncorrelated,
    Correlated,
}

/// Covariance hyperparameters on unconstrained scales (log sigma, raw r).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub structure: CovStructure,
    /// Components carrying a random intercept, in fixed lambda/phi/nu/gamma order.
    pub components: Vec<Component>,
    /// Number of units R.
    pub n_units: usize,
    /// log(sigma_c), one per active component.
    pub log_sigma: Vec<f64>,
    /// Spherical parameters, C(C-1)/2 of them; empty unless correlated.
    pub spherical_r: Vec<f64>,
}

impl CovarianceSpec {
    pub fn none() -> Self {
        Self {
            structure: CovStructure::None,
            components: Vec::new(),
            n_units: 0,
            log_sigma: Vec::new(),
            spherical_r: Vec::new(),
        }
    }

    pub fn new(
        structure: CovStructure,
        components: Vec<Component>,
        n_units: usize,
        log_sigma: Vec<f64>,
        spherical_r: Vec<f64>,
    ) -> Result<Self> {
        let c = components.len();
        match structure {
            CovStructure::None => {
                if c != 0 {
                    return Err(Error::Config(
                        "structure 'none' cannot carry random-effect components".into(),
                    ));
                }
            }
            CovStructure::Uncorrelated | CovStructure::Correlated => {
                if c == 0 {
                    return Err(Error::Config(
                        "random-effect structure requires at least one component".into(),
                    ));
                }
                if log_sigma.len() != c {
                    return Err(Error::Dim(format!(
                        "log_sigma must have {c} entries, got {}",
                        log_sigma.len()
                    )));
                }
                let want_r = if structure == CovStructure::Correlated {
                    c * (c - 1) / 2
                } else {
                    0
                };
                if spherical_r.len() != want_r {
                    return Err(Error::Dim(format!(
                        "spherical_r must have {want_r} entries, got {}",
                        spherical_r.len()
                    )));
                }
            }
        }
        Ok(Self {
            structure,
            components,
            n_units,
            log_sigma,
            spherical_r,
        })
    }

    /// Number of active random-effect components C.
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Total random-effect dimension C*R.
    pub fn b_len(&self) -> usize {
        self.n_components() * self.n_units
    }

    /// Count of unconstrained hyperparameters (log sigmas plus spherical r).
    pub fn n_hyper(&self) -> usize {
        self.log_sigma.len() + self.spherical_r.len()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|s| s.exp()).collect()
    }

    /// Hyperparameters packed as (log sigmas, spherical r), the outer
    /// optimizer's coordinate vector.
    pub fn pack_hyper(&self) -> Vec<f64> {
        let mut v = self.log_sigma.clone();
        v.extend_from_slice(&self.spherical_r);
        v
    }

    pub fn with_hyper(&self, packed: &[f64]) -> Result<Self> {
        if packed.len() != self.n_hyper() {
            return Err(Error::Dim(format!(
                "expected {} hyperparameters, got {}",
                self.n_hyper(),
                packed.len()
            )));
        }
        let mut out = self.clone();
        let c = self.log_sigma.len();
        out.log_sigma.copy_from_slice(&packed[..c]);
        out.spherical_r.copy_from_slice(&packed[c..]);
        Ok(out)
    }
}

/// Lower-triangular factor with unit-norm rows from the spherical parameters.
///
/// Row `i` (0-based) consumes parameters `r[i(i-1)/2 .. i(i+1)/2]`; any real
/// input yields a valid factor, so `L L'` is always a correlation matrix.
pub fn build_cholesky_factor(r: &[f64], dim: usize) -> Result<DMatrix<f64>> {
    if r.len() != dim * (dim - 1) / 2 {
        return Err(Error::Dim(format!(
            "need {} spherical parameters for dimension {dim}, got {}",
            dim * (dim - 1) / 2,
            r.len()
        )));
    }
    let mut l = DMatrix::zeros(dim, dim);
    l[(0, 0)] = 1.0;
    let mut offset = 0;
    for i in 1..dim {
        let row = &r[offset..offset + i];
        offset += i;
        // running product of 1/sqrt(q^2+1) factors along the row
        let mut shrink = 1.0;
        for (j, &q) in row.iter().enumerate() {
            let denom = q.hypot(1.0);
            l[(i, j)] = q / denom * shrink;
            shrink /= denom;
        }
        l[(i, i)] = shrink;
    }
    Ok(l)
}

/// Between-component covariance `Omega = D L L' D` (correlated structures only).
pub fn omega(spec: &CovarianceSpec) -> Result<DMatrix<f64>> {
    if spec.structure != CovStructure::Correlated {
        return Err(Error::Config(
            "omega is defined for the correlated structure".into(),
        ));
    }
    let c = spec.n_components();
    let l = build_cholesky_factor(&spec.spherical_r, c)?;
    let sig = spec.sigmas();
    let mut om = &l * l.transpose();
    for i in 0..c {
        for j in 0..c {
            om[(i, j)] *= sig[i] * sig[j];
        }
    }
    Ok(om)
}

/// Inverse of `Omega`, treating uncorrelated structures as diagonal.
fn omega_inv(spec: &CovarianceSpec) -> Result<DMatrix<f64>> {
    let c = spec.n_components();
    match spec.structure {
        CovStructure::None => Ok(DMatrix::zeros(0, 0)),
        CovStructure::Uncorrelated => {
            let mut m = DMatrix::zeros(c, c);
            for (i, s) in spec.sigmas().iter().enumerate() {
                m[(i, i)] = 1.0 / (s * s);
            }
            Ok(m)
        }
        CovStructure::Correlated => {
            let om = omega(spec)?;
            let chol = nalgebra::Cholesky::new(om)
                .expect("spherical parametrization guarantees positive definiteness");
            Ok(chol.inverse())
        }
    }
}

/// log |Sigma| in closed form: `2R (sum log sigma_c - 1/2 sum log(r_i^2 + 1))`,
/// with the r-sum absent for uncorrelated structures.
pub fn sigma_logdet(spec: &CovarianceSpec) -> f64 {
    if spec.structure == CovStructure::None {
        return 0.0;
    }
    let sum_log_sigma: f64 = spec.log_sigma.iter().sum();
    let sum_log_r: f64 = spec.spherical_r.iter().map(|r| (r * r).ln_1p()).sum();
    2.0 * spec.n_units as f64 * (sum_log_sigma - 0.5 * sum_log_r)
}

/// `(b' Sigma^-1 b, Sigma^-1 b)` exploiting `Sigma^-1 = Omega^-1 (x) I_R`.
///
/// `b` is component-major: the first R entries belong to the first active
/// component, and so on.
pub fn quad_form_and_solve(b: &DVector<f64>, spec: &CovarianceSpec) -> Result<(f64, DVector<f64>)> {
    let c = spec.n_components();
    let r = spec.n_units;
    if b.len() != c * r {
        return Err(Error::Dim(format!(
            "b must have {} entries (C={c} components x R={r} units), got {}",
            c * r,
            b.len()
        )));
    }
    if c == 0 {
        return Ok((0.0, DVector::zeros(0)));
    }
    let oinv = omega_inv(spec)?;
    let mut solved = DVector::zeros(c * r);
    for unit in 0..r {
        for ci in 0..c {
            let mut acc = 0.0;
            for cj in 0..c {
                acc += oinv[(ci, cj)] * b[cj * r + unit];
            }
            solved[ci * r + unit] = acc;
        }
    }
    Ok((b.dot(&solved), solved))
}

/// Adds `Sigma^-1` into the `[b, b]` block of a Fisher matrix whose random
/// effects start at `b_offset`.
pub(crate) fn add_sigma_inv(
    fisher: &mut DMatrix<f64>,
    spec: &CovarianceSpec,
    b_offset: usize,
) -> Result<()> {
    let c = spec.n_components();
    if c == 0 {
        return Ok(());
    }
    let r = spec.n_units;
    let oinv = omega_inv(spec)?;
    for ci in 0..c {
        for cj in 0..c {
            let v = oinv[(ci, cj)];
            if v == 0.0 {
                continue;
            }
            for unit in 0..r {
                fisher[(b_offset + ci * r + unit, b_offset + cj * r + unit)] += v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn correlated(c: usize, n_units: usize, log_sigma: Vec<f64>, r: Vec<f64>) -> CovarianceSpec {
        CovarianceSpec::new(
            CovStructure::Correlated,
            Component::ALL[..c].to_vec(),
            n_units,
            log_sigma,
            r,
        )
        .unwrap()
    }

    fn uncorrelated(c: usize, n_units: usize, log_sigma: Vec<f64>) -> CovarianceSpec {
        CovarianceSpec::new(
            CovStructure::Uncorrelated,
            Component::ALL[..c].to_vec(),
            n_units,
            log_sigma,
            vec![],
        )
        .unwrap()
    }

    /// Dense `Omega (x) I_R` for the oracle comparisons.
    fn dense_sigma(spec: &CovarianceSpec) -> DMatrix<f64> {
        let c = spec.n_components();
        let r = spec.n_units;
        let om = match spec.structure {
            CovStructure::Correlated => omega(spec).unwrap(),
            CovStructure::Uncorrelated => {
                let mut m = DMatrix::zeros(c, c);
                for (i, s) in spec.sigmas().iter().enumerate() {
                    m[(i, i)] = s * s;
                }
                m
            }
            CovStructure::None => return DMatrix::zeros(0, 0),
        };
        let mut sig = DMatrix::zeros(c * r, c * r);
        for ci in 0..c {
            for cj in 0..c {
                for unit in 0..r {
                    sig[(ci * r + unit, cj * r + unit)] = om[(ci, cj)];
                }
            }
        }
        sig
    }

    #[test]
    fn factor_is_identity_at_zero() {
        let l = build_cholesky_factor(&[0.0; 6], 4).unwrap();
        assert_eq!(l, DMatrix::identity(4, 4));
    }

    #[test]
    fn factor_two_dim_hand_value() {
        let l = build_cholesky_factor(&[1.0], 2).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert_relative_eq!(l[(1, 0)], s, epsilon = 1e-15);
        assert_relative_eq!(l[(1, 1)], s, epsilon = 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn factor_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let l = build_cholesky_factor(&r, 4).unwrap();
            let g = &l * l.transpose();
            for i in 0..4 {
                assert!((g[(i, i)] - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn omega_identity_and_hand_value() {
        let spec = correlated(4, 1, vec![0.0; 4], vec![0.0; 6]);
        assert_relative_eq!(omega(&spec).unwrap(), DMatrix::identity(4, 4), epsilon = 1e-15);

        // sigma = (1, 2), r = 1: Omega = [[1, sqrt(2)], [sqrt(2), 4]]
        let spec = correlated(2, 1, vec![0.0, 2.0f64.ln()], vec![1.0]);
        let om = omega(&spec).unwrap();
        assert_relative_eq!(om[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(om[(0, 1)], 2.0f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(om[(1, 0)], 2.0f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(om[(1, 1)], 4.0, epsilon = 1e-14);
    }

    #[test]
    fn omega_positive_definite_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let spec = correlated(
                4,
                1,
                (0..4).map(|_| rng.random_range(-3.0..3.0)).collect(),
                (0..6).map(|_| rng.random_range(-10.0..10.0)).collect(),
            );
            let om = omega(&spec).unwrap();
            let eig = om.symmetric_eigen();
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > 0.0, "smallest eigenvalue {min}");
        }
    }

    #[test]
    fn logdet_closed_form_examples() {
        let spec = correlated(4, 3, vec![0.0; 4], vec![0.0; 6]);
        assert_eq!(sigma_logdet(&spec), 0.0);

        let spec = correlated(4, 2, vec![1.0; 4], vec![0.0; 6]);
        assert_relative_eq!(sigma_logdet(&spec), 16.0, epsilon = 1e-13);

        let spec = uncorrelated(1, 16, vec![1.5f64.ln()]);
        assert_relative_eq!(sigma_logdet(&spec), 32.0 * 1.5f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn logdet_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for &c in &[1usize, 2, 3, 4] {
            for &r in &[1usize, 3, 8] {
                let spec = correlated(
                    c,
                    r,
                    (0..c).map(|_| rng.random_range(-1.5..1.5)).collect(),
                    (0..c * (c - 1) / 2)
                        .map(|_| rng.random_range(-4.0..4.0))
                        .collect(),
                );
                let dense = dense_sigma(&spec);
                let dense_logdet = nalgebra::Cholesky::new(dense)
                    .unwrap()
                    .l()
                    .diagonal()
                    .iter()
                    .map(|d| 2.0 * d.ln())
                    .sum::<f64>();
                assert_relative_eq!(
                    sigma_logdet(&spec),
                    dense_logdet,
                    epsilon = 1e-9,
                    max_relative = 1e-9
                );
            }
        }
    }

    #[test]
    fn quad_form_identity_and_hand_value() {
        let spec = uncorrelated(2, 3, vec![0.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (q, s) = quad_form_and_solve(&b, &spec).unwrap();
        assert_relative_eq!(q, b.dot(&b), epsilon = 1e-14);
        assert_relative_eq!(s, b, epsilon = 1e-14);

        // C=2, R=1, Omega = [[1, sqrt2], [sqrt2, 4]], b = e1:
        // quad form = (Omega^-1)[0,0] = 4/(4-2) = 2
        let spec = correlated(2, 1, vec![0.0, 2.0f64.ln()], vec![1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let (q, _) = quad_form_and_solve(&b, &spec).unwrap();
        assert_relative_eq!(q, 2.0, epsilon = 1e-13);
    }

    #[test]
    fn kronecker_solve_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..20 {
            let c = 1 + trial % 4;
            let r = 1 + trial % 5;
            let spec = correlated(
                c,
                r,
                (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..c * (c - 1) / 2)
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect(),
            );
            let b = DVector::from_fn(c * r, |_, _| rng.random_range(-2.0..2.0));
            let (q, s) = quad_form_and_solve(&b, &spec).unwrap();

            let dense = dense_sigma(&spec);
            let dense_solved = nalgebra::Cholesky::new(dense).unwrap().solve(&b);
            assert_relative_eq!(s, dense_solved, epsilon = 1e-10, max_relative = 1e-10);
            assert_relative_eq!(q, b.dot(&dense_solved), epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn add_sigma_inv_matches_dense_inverse() {
        let spec = correlated(3, 4, vec![0.1, -0.4, 0.3], vec![0.7, -1.2, 0.4]);
        let n = 2 + spec.b_len();
        let mut f = DMatrix::zeros(n, n);
        add_sigma_inv(&mut f, &spec, 2).unwrap();
        let dense_inv = dense_sigma(&spec).try_inverse().unwrap();
        for i in 0..spec.b_len() {
            for j in 0..spec.b_len() {
                assert_relative_eq!(f[(2 + i, 2 + j)], dense_inv[(i, j)], epsilon = 1e-10);
            }
        }
        // fixed-effect block untouched
        assert_eq!(f[(0, 0)], 0.0);
        assert_eq!(f[(1, 0)], 0.0);
    }
}
