//! Negative binomial and zero-inflated negative binomial probability
//! functions, moments, CDF and sampling.
//!
//! The negative binomial is parametrized by its mean `mu` and overdispersion
//! `psi`, so the variance is `mu * (1 + psi * mu)`; the underlying size
//! parameter is `1/psi`. `psi = 0` evaluates the exact Poisson limit, which
//! lets Poisson models share every code path.

use rand::Rng;
use rand_distr::{Distribution as _, Gamma, Poisson};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::math::log_sum_exp2;

/// Parameters of a single zero-inflated negative binomial observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZinbParams {
    /// Conditional negative binomial mean, strictly positive.
    pub mu: f64,
    /// Overdispersion; zero means the Poisson limit.
    pub psi: f64,
    /// Zero-inflation probability in `[0, 1]`.
    pub gamma: f64,
}

impl ZinbParams {
    pub fn new(mu: f64, psi: f64, gamma: f64) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Domain(format!("mu must be positive, got {mu}")));
        }
        if !(psi >= 0.0) || !psi.is_finite() {
            return Err(Error::Domain(format!("psi must be nonnegative, got {psi}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Domain(format!("gamma must be in [0, 1], got {gamma}")));
        }
        Ok(Self { mu, psi, gamma })
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Domain(format!("mu must be positive, got {mu}")));
    }
    Ok(())
}

/// Log pmf of NB(mu, psi); the exact Poisson log pmf when `psi = 0`.
pub fn nb_logpmf(y: u64, mu: f64, psi: f64) -> Result<f64> {
    check_mu(mu)?;
    if !(psi >= 0.0) {
        return Err(Error::Domain(format!("psi must be nonnegative, got {psi}")));
    }
    Ok(nb_logpmf_f(y as f64, mu, psi))
}

pub(crate) fn nb_logpmf_f(yf: f64, mu: f64, psi: f64) -> f64 {
    if psi == 0.0 {
        return yf * mu.ln() - mu - ln_gamma(yf + 1.0);
    }
    let k = 1.0 / psi;
    // k*ln(k/(k+mu)) written as -k*ln1p(mu/k) stays accurate as psi -> 0
    ln_gamma(yf + k) - ln_gamma(k) - ln_gamma(yf + 1.0) - k * (mu / k).ln_1p()
        + yf * (mu.ln() - (k + mu).ln())
}

/// Log pmf of the zero-inflated mixture
/// `gamma * 1{y=0} + (1 - gamma) * NB(y; mu, psi)`.
pub fn zinb_logpmf(y: u64, p: &ZinbParams) -> Result<f64> {
    check_mu(p.mu)?;
    let l_nb = nb_logpmf_f(y as f64, p.mu, p.psi);
    Ok(zinb_logpmf_from_parts(y == 0, l_nb, p.gamma))
}

/// Mixture log pmf given the NB log pmf of the observation; shared with the
/// likelihood cell loop. `gamma = 0` returns `l_nb` bit-for-bit.
pub(crate) fn zinb_logpmf_from_parts(is_zero: bool, l_nb: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return l_nb;
    }
    let log_1m_gamma = (-gamma).ln_1p();
    if is_zero {
        log_sum_exp2(gamma.ln(), log_1m_gamma + l_nb)
    } else {
        log_1m_gamma + l_nb
    }
}

/// Mean `(1 - gamma) * mu`.
pub fn zinb_mean(p: &ZinbParams) -> f64 {
    (1.0 - p.gamma) * p.mu
}

/// Variance `(1 - gamma) * (1 + mu*psi + gamma*mu) * mu`.
pub fn zinb_var(p: &ZinbParams) -> f64 {
    (1.0 - p.gamma) * (1.0 + p.mu * p.psi + p.gamma * p.mu) * p.mu
}

/// CDF `gamma + (1 - gamma) * F_NB(y)`.
pub fn zinb_cdf(y: u64, p: &ZinbParams) -> Result<f64> {
    check_mu(p.mu)?;
    let yf = y as f64;
    let f_nb = if p.psi == 0.0 {
        // Poisson CDF = regularized upper incomplete gamma Q(y+1, mu)
        gamma_ur(yf + 1.0, p.mu)
    } else {
        let k = 1.0 / p.psi;
        let prob = 1.0 / (1.0 + p.psi * p.mu);
        beta_reg(k, yf + 1.0, prob)
    };
    Ok((p.gamma + (1.0 - p.gamma) * f_nb).min(1.0))
}

/// Draws from the mixture via its hierarchical form: a Bernoulli(gamma)
/// structural-zero indicator, then a gamma-Poisson draw for the NB part.
/// Deterministic given the generator state.
pub fn zinb_sample<R: Rng + ?Sized>(rng: &mut R, p: &ZinbParams) -> u64 {
    if p.gamma > 0.0 && rng.random_bool(p.gamma) {
        return 0;
    }
    nb_sample(rng, p.mu, p.psi)
}

pub(crate) fn nb_sample<R: Rng + ?Sized>(rng: &mut R, mu: f64, psi: f64) -> u64 {
    let rate = if psi == 0.0 {
        mu
    } else {
        let shape = 1.0 / psi;
        let scale = psi * mu;
        Gamma::new(shape, scale)
            .expect("valid gamma parameters")
            .sample(rng)
    };
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(mu: f64, psi: f64, gamma: f64) -> ZinbParams {
        ZinbParams::new(mu, psi, gamma).unwrap()
    }

    #[test]
    fn nb_zero_mass_closed_form() {
        // f(0) = (1/(1+psi*mu))^(1/psi) = 0.5^2 at mu=2, psi=0.5
        assert_relative_eq!(
            nb_logpmf(0, 2.0, 0.5).unwrap(),
            0.25f64.ln(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn nb_pmf_hand_value() {
        // k=2, p=1/2: f(3) = C(4,3) * 0.5^2 * 0.5^3 = 1/8
        assert_relative_eq!(
            nb_logpmf(3, 2.0, 0.5).unwrap(),
            0.125f64.ln(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn nb_poisson_limit_exact() {
        assert_relative_eq!(nb_logpmf(0, 2.0, 0.0).unwrap(), -2.0, epsilon = 1e-15);
    }

    #[test]
    fn nb_rejects_bad_mu() {
        assert!(nb_logpmf(1, 0.0, 0.5).is_err());
        assert!(nb_logpmf(1, -1.0, 0.5).is_err());
    }

    #[test]
    fn nb_sums_to_one() {
        let mut total = 0.0;
        for y in 0..=1000 {
            total += nb_logpmf(y, 2.0, 0.5).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-12, "sum = {total}");
    }

    #[test]
    fn zinb_zero_and_positive_mass() {
        let p = params(2.0, 0.5, 0.3);
        // 0.3 + 0.7*0.25 = 0.475
        assert_relative_eq!(
            zinb_logpmf(0, &p).unwrap(),
            0.475f64.ln(),
            epsilon = 1e-13
        );
        // 0.7 * 0.125 = 0.0875
        assert_relative_eq!(
            zinb_logpmf(3, &p).unwrap(),
            0.0875f64.ln(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn zinb_reduces_to_nb_when_gamma_zero() {
        for y in [0u64, 1, 5, 40] {
            let p = params(3.2, 0.7, 0.0);
            let zi = zinb_logpmf(y, &p).unwrap();
            let nb = nb_logpmf(y, 3.2, 0.7).unwrap();
            assert_eq!(zi, nb);
        }
    }

    #[test]
    fn poisson_continuity() {
        for y in [0u64, 1, 3, 10] {
            let near = nb_logpmf(y, 4.0, 1e-8).unwrap();
            let pois = nb_logpmf(y, 4.0, 0.0).unwrap();
            assert!((near - pois).abs() < 1e-5, "y={y}: {near} vs {pois}");
        }
    }

    #[test]
    fn moments_match_formulas() {
        let p = params(2.0, 0.5, 0.3);
        assert_relative_eq!(zinb_mean(&p), 1.4, epsilon = 1e-15);
        assert_relative_eq!(zinb_var(&p), 3.64, epsilon = 1e-14);

        let nb = params(2.0, 0.5, 0.0);
        assert_relative_eq!(zinb_mean(&nb), 2.0, epsilon = 1e-15);
        assert_relative_eq!(zinb_var(&nb), 4.0, epsilon = 1e-15);

        let degenerate = params(2.0, 0.5, 1.0);
        assert_eq!(zinb_mean(&degenerate), 0.0);
        assert_eq!(zinb_var(&degenerate), 0.0);
    }

    #[test]
    fn cdf_matches_pmf_sums() {
        let p = params(2.0, 0.5, 0.3);
        assert_relative_eq!(zinb_cdf(0, &p).unwrap(), 0.475, epsilon = 1e-12);
        let mut cum = 0.0;
        for y in 0..=30 {
            cum += zinb_logpmf(y, &p).unwrap().exp();
            assert_relative_eq!(zinb_cdf(y, &p).unwrap(), cum, epsilon = 1e-11);
        }
        assert!((zinb_cdf(10_000, &p).unwrap() - 1.0).abs() < 1e-12);
        let degenerate = params(2.0, 0.5, 1.0);
        assert_eq!(zinb_cdf(0, &degenerate).unwrap(), 1.0);
        assert_eq!(zinb_cdf(7, &degenerate).unwrap(), 1.0);
    }

    #[test]
    fn cdf_nondecreasing_poisson_branch() {
        let p = params(5.0, 0.0, 0.2);
        let mut prev = 0.0;
        for y in 0..60 {
            let c = zinb_cdf(y, &p).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        assert!((prev - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_deterministic_and_degenerate() {
        let p = params(2.0, 0.5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            assert_eq!(zinb_sample(&mut rng, &p), 0);
        }

        let p = params(2.0, 0.5, 0.3);
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| zinb_sample(&mut rng, &p)).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn sample_mean_matches_formula() {
        let p = params(2.0, 0.5, 0.3);
        let n = 200_000u64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sum: u64 = (0..n).map(|_| zinb_sample(&mut rng, &p)).sum();
        let mean = sum as f64 / n as f64;
        let se = (zinb_var(&p) / n as f64).sqrt();
        assert!(
            (mean - zinb_mean(&p)).abs() < 4.0 * se,
            "mean {mean} vs {} (se {se})",
            zinb_mean(&p)
        );
    }
}
