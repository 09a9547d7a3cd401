//! Effective reproduction numbers from the fitted model: the next-generation
//! matrix at each time and its dominant eigenvalue.

use nalgebra::DMatrix;

use crate::data::WeightMatrix;
use crate::error::{Error, Result};

/// Expected non-environmental transmission at one time point, as the matrix
/// acting on the previous counts: diagonal `(1-gamma_rt) lambda_rt`,
/// off-diagonal `(r, r') = (1-gamma_rt) phi_rt w_{r'r}`.
#[derive(Debug, Clone)]
pub struct NextGenMatrix {
    pub a: DMatrix<f64>,
}

/// Builds the next-generation matrix from per-unit surfaces at one time.
/// `lambda`/`phi`/`gamma` are `None` when the component is absent (absent
/// `phi` zeroes the off-diagonals, absent `gamma` means no thinning).
pub fn build_next_gen(
    lambda: Option<&[f64]>,
    phi: Option<&[f64]>,
    gamma: Option<&[f64]>,
    weights: &WeightMatrix,
) -> Result<NextGenMatrix> {
    let n = weights.w.nrows();
    for (name, s) in [("lambda", &lambda), ("phi", &phi), ("gamma", &gamma)] {
        if let Some(s) = s {
            if s.len() != n {
                return Err(Error::Dim(format!(
                    "{name} surface has {} entries, weights describe {n} units",
                    s.len()
                )));
            }
        }
    }
    let mut a = DMatrix::zeros(n, n);
    for r in 0..n {
        let thin = 1.0 - gamma.map_or(0.0, |g| g[r]);
        if let Some(lam) = lambda {
            a[(r, r)] = thin * lam[r];
        }
        if let Some(ph) = phi {
            for rp in 0..n {
                if rp != r {
                    a[(r, rp)] = thin * ph[r] * weights.w[(rp, r)];
                }
            }
        }
    }
    Ok(NextGenMatrix { a })
}

/// Dominant eigenvalue (spectral radius) of a nonnegative matrix.
///
/// Power iteration from the uniform vector with a Rayleigh-quotient
/// stagnation test; falls back to a dense eigensolver if the iteration fails
/// to settle (periodic or defective cases).
pub fn reproduction_number(next_gen: &NextGenMatrix) -> f64 {
    let a = &next_gen.a;
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return a[(0, 0)].abs();
    }
    if a.iter().all(|v| *v == 0.0) {
        return 0.0;
    }

    let tol = 1e-12;
    let max_iter = 100_000;
    let mut v = nalgebra::DVector::from_element(n, 1.0 / n as f64);
    let mut rho_prev = f64::NAN;
    for _ in 0..max_iter {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let v_next = &w / norm;
        let rho = v_next.dot(&(a * &v_next));
        if (rho - rho_prev).abs() <= tol * rho.abs().max(1.0) {
            return rho.abs();
        }
        rho_prev = rho;
        v = v_next;
    }
    dense_spectral_radius(a)
}

fn dense_spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Spectral radius for models without a neighbourhood component: the matrix
/// is diagonal, so it is just `max_r (1-gamma_r) lambda_r`.
pub fn reproduction_number_no_nbr(lambda: &[f64], gamma: Option<&[f64]>) -> f64 {
    lambda
        .iter()
        .enumerate()
        .map(|(r, lam)| (1.0 - gamma.map_or(0.0, |g| g[r])) * lam)
        .fold(0.0, f64::max)
}
