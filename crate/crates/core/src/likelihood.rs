//! Log-likelihood, penalized log-likelihood, analytic score and observed
//! Fisher information, and the Laplace-approximate marginal log-likelihood.
//!
//! Writing `F = f(y; mu, psi)` for the negative binomial mass, `l_zi` for the
//! mixture log term and `E = exp(-l_zi)`, every cell contributes through a
//! handful of scalar weights:
//!
//! * HHH blocks enter scaled by `w1 = E (1-gamma) F`, which is exactly 1 for
//!   positive counts, so those cells reduce to plain HHH score/curvature.
//! * The gamma block enters through `E (1{y=0} - F) g'(x) u`, which collapses
//!   to `-gamma u` on positive counts.
//! * Cross blocks between HHH and gamma parameters vanish on positive counts
//!   (the log-likelihood separates there); only zero cells couple them.
//!
//! The inner HHH derivatives are, with `k = 1/psi = exp(psi_tilde)`:
//! `dl/dmu = y/mu - (k+y)/(k+mu)`, `d2l/dmu2 = -y/mu^2 + (k+y)/(k+mu)^2`,
//! `dl/dk = digamma(y+k) - digamma(k) - ln1p(mu/k) + (mu-y)/(k+mu)`, and
//! `psi_tilde` derivatives follow from `d/dpsi_tilde = k d/dk`. All of them
//! are covered by the finite-difference suites.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::digamma;

use crate::covariance::{self, CovStructure, CovarianceSpec};
use crate::design::{Component, DesignMatrices, ParameterState, Surfaces};
use crate::dist;
use crate::error::{Error, Result};
use crate::math::{trigamma, KahanSum};

/// Read-only evaluation context: the assembled design plus an optional cell
/// mask (`false` cells contribute zero to every sum).
#[derive(Debug, Clone)]
pub struct LikelihoodContext<'a> {
    pub design: &'a DesignMatrices,
    pub mask: Option<Vec<bool>>,
}

impl<'a> LikelihoodContext<'a> {
    pub fn new(design: &'a DesignMatrices) -> Self {
        Self { design, mask: None }
    }

    pub fn with_mask(design: &'a DesignMatrices, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != design.n_cells() {
            return Err(Error::Dim(format!(
                "mask must cover {} cells, got {}",
                design.n_cells(),
                mask.len()
            )));
        }
        Ok(Self {
            design,
            mask: Some(mask),
        })
    }

    fn included(&self, cell: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[cell])
    }
}

/// NB log-mass and the inner derivatives needed by the chain rule.
struct NbDerivs {
    l_h: f64,
    d_mu: f64,
    d_mu2: f64,
    d_pt: f64,
    d_pt2: f64,
    d_mu_pt: f64,
}

fn nb_derivs(y: f64, mu: f64, psi: f64) -> NbDerivs {
    if psi == 0.0 {
        return NbDerivs {
            l_h: dist::nb_logpmf_f(y, mu, psi),
            d_mu: y / mu - 1.0,
            d_mu2: -y / (mu * mu),
            d_pt: 0.0,
            d_pt2: 0.0,
            d_mu_pt: 0.0,
        };
    }
    let k = 1.0 / psi;
    let km = k + mu;
    let hk = digamma(y + k) - digamma(k) - (mu / k).ln_1p() + (mu - y) / km;
    let hkk = trigamma(y + k) - trigamma(k) + 1.0 / k - 1.0 / km - (mu - y) / (km * km);
    NbDerivs {
        l_h: dist::nb_logpmf_f(y, mu, psi),
        d_mu: y / mu - (k + y) / km,
        d_mu2: -y / (mu * mu) + (k + y) / (km * km),
        d_pt: k * hk,
        d_pt2: k * hk + k * k * hkk,
        d_mu_pt: k * (y - mu) / (km * km),
    }
}

/// Mixture weights of one cell (see the module docs for the definitions).
struct ZiWeights {
    l_cell: f64,
    w1: f64,
    c_gam: f64,
    c_gam_fisher: f64,
    c_cross: f64,
}

fn zi_weights(is_zero: bool, l_h: f64, gamma: Option<(f64, f64)>) -> ZiWeights {
    let Some((gam, g1)) = gamma else {
        return ZiWeights {
            l_cell: l_h,
            w1: 1.0,
            c_gam: 0.0,
            c_gam_fisher: 0.0,
            c_cross: 0.0,
        };
    };
    let l_cell = dist::zinb_logpmf_from_parts(is_zero, l_h, gam);
    if !is_zero {
        let c_gam = if g1 == 0.0 { 0.0 } else { -gam };
        return ZiWeights {
            l_cell,
            w1: 1.0,
            c_gam,
            c_gam_fisher: c_gam * c_gam - c_gam * (1.0 - 2.0 * gam),
            c_cross: 0.0,
        };
    }
    let f0 = l_h.exp();
    let fzi = gam + (1.0 - gam) * f0;
    let w1 = (1.0 - gam) * f0 / fzi;
    let c_e = (1.0 - f0) / fzi;
    let c_gam = c_e * g1;
    ZiWeights {
        l_cell,
        w1,
        c_gam,
        c_gam_fisher: c_gam * c_gam - c_gam * (1.0 - 2.0 * gam),
        c_cross: f0 / fzi * g1 * (1.0 + (1.0 - gam) * c_e),
    }
}

fn check_cov(state: &ParameterState, cov: &CovarianceSpec, ctx: &LikelihoodContext) -> Result<()> {
    if state.b.len() != cov.b_len() {
        return Err(Error::Dim(format!(
            "random-effect vector has {} entries but the covariance spec describes {}",
            state.b.len(),
            cov.b_len()
        )));
    }
    if cov.structure != CovStructure::None && cov.n_units != ctx.design.n_units {
        return Err(Error::Dim(format!(
            "covariance spec has {} units, design has {}",
            cov.n_units, ctx.design.n_units
        )));
    }
    Ok(())
}

/// Unpenalized log-likelihood: the sum of mixture log-pmf terms over all
/// included cells (t = 2..T).
pub fn loglik(state: &ParameterState, ctx: &LikelihoodContext) -> Result<f64> {
    let surf = ctx.design.eval_predictors(state)?;
    sum_cells(state, ctx, &surf)
}

fn sum_cells(state: &ParameterState, ctx: &LikelihoodContext, surf: &Surfaces) -> Result<f64> {
    let design = ctx.design;
    let lay = &design.layout;
    let mut acc = KahanSum::new();
    for cell in 0..design.n_cells() {
        if !ctx.included(cell) {
            continue;
        }
        let r = cell % design.n_units;
        let mu = surf.mu[cell];
        let y = design.y[cell];
        if !(mu > 0.0) || !mu.is_finite() {
            let (unit, time) = design.cell_location(cell);
            return Err(Error::Numeric {
                unit,
                time,
                msg: format!("conditional mean {mu} is not positive"),
            });
        }
        let l_h = dist::nb_logpmf_f(y, mu, state.psi(lay, r));
        let l_cell = match &surf.gamma {
            Some(g) => dist::zinb_logpmf_from_parts(y == 0.0, l_h, g[cell]),
            None => l_h,
        };
        if !l_cell.is_finite() {
            let (unit, time) = design.cell_location(cell);
            return Err(Error::Numeric {
                unit,
                time,
                msg: format!("non-finite log-likelihood term {l_cell}"),
            });
        }
        acc.add(l_cell);
    }
    Ok(acc.value())
}

/// Penalized log-likelihood `loglik - b' Sigma^-1 b / 2` (the additive normal
/// constant is dropped).
pub fn penloglik(
    state: &ParameterState,
    cov: &CovarianceSpec,
    ctx: &LikelihoodContext,
) -> Result<f64> {
    check_cov(state, cov, ctx)?;
    let l = loglik(state, ctx)?;
    if state.b.is_empty() {
        return Ok(l);
    }
    let (quad, _) = covariance::quad_form_and_solve(&state.b, cov)?;
    Ok(l - 0.5 * quad)
}

/// Analytic gradient of the penalized log-likelihood, packed like the state.
pub fn score_pen(
    state: &ParameterState,
    cov: &CovarianceSpec,
    ctx: &LikelihoodContext,
) -> Result<DVector<f64>> {
    let (_, score, _) = score_fisher_impl(state, cov, ctx, false)?;
    Ok(score)
}

/// Observed Fisher information of the penalized log-likelihood
/// (`-d^2 l_pen`, so `Sigma^-1` is added on the random-effect diagonal block).
pub fn fisher_pen(
    state: &ParameterState,
    cov: &CovarianceSpec,
    ctx: &LikelihoodContext,
) -> Result<DMatrix<f64>> {
    let (_, _, fisher) = score_fisher_impl(state, cov, ctx, true)?;
    Ok(fisher.expect("fisher requested"))
}

/// One-pass evaluation of `(l_pen, score_pen, fisher_pen)` for the Newton
/// inner loop.
pub fn score_fisher_pen(
    state: &ParameterState,
    cov: &CovarianceSpec,
    ctx: &LikelihoodContext,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let (lpen, score, fisher) = score_fisher_impl(state, cov, ctx, true)?;
    Ok((lpen, score, fisher.expect("fisher requested")))
}

/// Unpenalized Fisher information (no `Sigma^-1` term); the marginal
/// log-likelihood caches this across covariance proposals.
pub fn fisher_unpenalized(
    state: &ParameterState,
    ctx: &LikelihoodContext,
) -> Result<DMatrix<f64>> {
    let (_, _, fisher) = cell_sums(state, ctx, true)?;
    Ok(fisher.expect("fisher requested"))
}

fn score_fisher_impl(
    state: &ParameterState,
    cov: &CovarianceSpec,
    ctx: &LikelihoodContext,
    want_fisher: bool,
) -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>)> {
    check_cov(state, cov, ctx)?;
    let (mut lpen, mut score, mut fisher) = cell_sums(state, ctx, want_fisher)?;
    if !state.b.is_empty() {
        let (quad, solved) = covariance::quad_form_and_solve(&state.b, cov)?;
        lpen -= 0.5 * quad;
        let b_start = ctx.design.layout.n_theta;
        for i in 0..state.b.len() {
            score[b_start + i] -= solved[i];
        }
        if let Some(f) = fisher.as_mut() {
            covariance::add_sigma_inv(f, cov, b_start)?;
        }
    }
    Ok((lpen, score, fisher))
}

/// Scatter indices and design values of one component at one cell.
struct CompScratch {
    comp: Component,
    idx: Vec<usize>,
    u: Vec<f64>,
}

fn cell_sums(
    state: &ParameterState,
    ctx: &LikelihoodContext,
    want_fisher: bool,
) -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>)> {
    let design = ctx.design;
    let lay = &design.layout;
    let n = lay.total_len();
    let surf = design.eval_predictors(state)?;
    let mut loglik_acc = KahanSum::new();
    let mut score = DVector::zeros(n);
    let mut fisher = want_fisher.then(|| DMatrix::zeros(n, n));

    let hhh_comps: Vec<Component> = [Component::Lambda, Component::Phi, Component::Nu]
        .into_iter()
        .filter(|c| design.comps[c.index()].is_some())
        .collect();
    let mut scratch: Vec<CompScratch> = hhh_comps
        .iter()
        .map(|&c| CompScratch {
            comp: c,
            idx: Vec::new(),
            u: Vec::new(),
        })
        .collect();
    let mut gamma_scratch = design.comps[Component::Gamma.index()]
        .as_ref()
        .map(|_| (Vec::<usize>::new(), Vec::<f64>::new()));

    for cell in 0..design.n_cells() {
        if !ctx.included(cell) {
            continue;
        }
        let r = cell % design.n_units;
        let mu = surf.mu[cell];
        let y = design.y[cell];
        if !(mu > 0.0) || !mu.is_finite() {
            let (unit, time) = design.cell_location(cell);
            return Err(Error::Numeric {
                unit,
                time,
                msg: format!("conditional mean {mu} is not positive"),
            });
        }
        let psi = state.psi(lay, r);
        let nb = nb_derivs(y, mu, psi);
        let gamma_parts = surf.gamma.as_ref().map(|g| {
            let x = surf.gamma_x.as_ref().unwrap()[cell];
            let clamped = surf.gamma_clamped.as_ref().unwrap()[cell];
            let g1 = if clamped {
                0.0
            } else {
                crate::design::logistic_derivs(x).1
            };
            (g[cell], g1)
        });
        let w = zi_weights(y == 0.0, nb.l_h, gamma_parts);
        if !w.l_cell.is_finite() {
            let (unit, time) = design.cell_location(cell);
            return Err(Error::Numeric {
                unit,
                time,
                msg: format!("non-finite log-likelihood term {}", w.l_cell),
            });
        }
        loglik_acc.add(w.l_cell);

        // component multipliers d_c = d mu / d (linear predictor of c)
        let d_of = |c: Component| -> f64 {
            match c {
                Component::Lambda => surf.lambda.as_ref().unwrap()[cell] * design.y_prev[cell],
                Component::Phi => surf.phi.as_ref().unwrap()[cell] * design.nbr_prev[cell],
                Component::Nu => surf.nu.as_ref().unwrap()[cell],
                Component::Gamma => unreachable!(),
            }
        };

        for s in scratch.iter_mut() {
            fill_entries(design, s.comp, cell, r, &mut s.idx, &mut s.u);
        }
        if let Some((idx, u)) = gamma_scratch.as_mut() {
            fill_entries(design, Component::Gamma, cell, r, idx, u);
        }
        let psi_idx = lay.psi_index(r);

        // score
        for s in scratch.iter() {
            let coef = w.w1 * nb.d_mu * d_of(s.comp);
            for (&i, &ui) in s.idx.iter().zip(&s.u) {
                score[i] += coef * ui;
            }
        }
        if let Some(p) = psi_idx {
            score[p] += w.w1 * nb.d_pt;
        }
        if let Some((idx, u)) = gamma_scratch.as_ref() {
            for (&i, &ui) in idx.iter().zip(u) {
                score[i] += w.c_gam * ui;
            }
        }

        let Some(f) = fisher.as_mut() else {
            continue;
        };

        // HHH x HHH blocks: one coefficient times u_i u_j per component pair
        let rank1 = -w.w1 * (1.0 - w.w1);
        for a in scratch.iter() {
            let da = d_of(a.comp);
            for bb in scratch.iter() {
                let db = d_of(bb.comp);
                let mut coef = rank1 * (nb.d_mu * da) * (nb.d_mu * db) - w.w1 * nb.d_mu2 * da * db;
                if a.comp == bb.comp {
                    coef -= w.w1 * nb.d_mu * da;
                }
                for (&i, &ui) in a.idx.iter().zip(&a.u) {
                    for (&j, &uj) in bb.idx.iter().zip(&bb.u) {
                        f[(i, j)] += coef * ui * uj;
                    }
                }
            }
        }
        if let Some(p) = psi_idx {
            for a in scratch.iter() {
                let da = d_of(a.comp);
                let coef = rank1 * (nb.d_mu * da) * nb.d_pt - w.w1 * nb.d_mu_pt * da;
                for (&i, &ui) in a.idx.iter().zip(&a.u) {
                    f[(i, p)] += coef * ui;
                    f[(p, i)] += coef * ui;
                }
            }
            f[(p, p)] += rank1 * nb.d_pt * nb.d_pt - w.w1 * nb.d_pt2;
        }
        if let Some((gidx, gu)) = gamma_scratch.as_ref() {
            for (&i, &ui) in gidx.iter().zip(gu) {
                for (&j, &uj) in gidx.iter().zip(gu) {
                    f[(i, j)] += w.c_gam_fisher * ui * uj;
                }
            }
            // HHH x gamma cross terms couple only through zero cells
            if w.c_cross != 0.0 {
                for a in scratch.iter() {
                    let coef = w.c_cross * nb.d_mu * d_of(a.comp);
                    for (&i, &ui) in a.idx.iter().zip(&a.u) {
                        for (&j, &uj) in gidx.iter().zip(gu) {
                            f[(i, j)] += coef * ui * uj;
                            f[(j, i)] += coef * ui * uj;
                        }
                    }
                }
                if let Some(p) = psi_idx {
                    let coef = w.c_cross * nb.d_pt;
                    for (&j, &uj) in gidx.iter().zip(gu) {
                        f[(p, j)] += coef * uj;
                        f[(j, p)] += coef * uj;
                    }
                }
            }
        }
    }
    Ok((loglik_acc.value(), score, fisher))
}

fn fill_entries(
    design: &DesignMatrices,
    c: Component,
    cell: usize,
    r: usize,
    idx: &mut Vec<usize>,
    u: &mut Vec<f64>,
) {
    idx.clear();
    u.clear();
    let lay = &design.layout;
    let cd = design.comps[c.index()].as_ref().unwrap();
    let cl = lay.comp[c.index()].as_ref().unwrap();
    let row = &cd.x[cell * cd.n_cols..(cell + 1) * cd.n_cols];
    idx.push(cl.alpha);
    u.push(1.0);
    for (j, packed) in cl.beta.clone().enumerate() {
        idx.push(packed);
        u.push(row[j + 1]);
    }
    if cl.b_off.is_some() {
        idx.push(lay.b_index(c, r));
        u.push(1.0);
    }
}

/// Laplace-approximate marginal log-likelihood of the covariance
/// hyperparameters at the current estimates:
/// `-log|Sigma|/2 - b' Sigma^-1 b / 2 - log|F_pen|/2`.
///
/// Returns `-inf` when `F_pen` stays non-positive-definite after the ridge
/// retries, so a simplex optimizer simply rejects the proposal.
pub fn marginal_loglik(
    cov: &CovarianceSpec,
    state: &ParameterState,
    ctx: &LikelihoodContext,
) -> Result<f64> {
    if cov.structure == CovStructure::None {
        return Err(Error::Config(
            "the marginal log-likelihood is defined for models with random effects".into(),
        ));
    }
    check_cov(state, cov, ctx)?;
    let f0 = fisher_unpenalized(state, ctx)?;
    marginal_loglik_from_f0(cov, state, ctx, &f0)
}

/// Same as [`marginal_loglik`] but reuses a precomputed unpenalized Fisher
/// matrix (it does not depend on the covariance proposal).
pub fn marginal_loglik_from_f0(
    cov: &CovarianceSpec,
    state: &ParameterState,
    ctx: &LikelihoodContext,
    f0: &DMatrix<f64>,
) -> Result<f64> {
    let (quad, _) = covariance::quad_form_and_solve(&state.b, cov)?;
    let mut fpen = f0.clone();
    covariance::add_sigma_inv(&mut fpen, cov, ctx.design.layout.n_theta)?;
    match logdet_spd_with_ridge(&fpen) {
        Some(logdet) => Ok(-0.5 * covariance::sigma_logdet(cov) - 0.5 * quad - 0.5 * logdet),
        None => Ok(f64::NEG_INFINITY),
    }
}

/// log-determinant via Cholesky; on failure adds an escalating ridge
/// `1e-8 * mean|diag| * 10^attempt` for up to 6 retries before giving up.
pub(crate) fn logdet_spd_with_ridge(m: &DMatrix<f64>) -> Option<f64> {
    if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
        return Some(chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum());
    }
    let n = m.nrows();
    let mean_diag = m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n.max(1) as f64;
    let mut ridge = 1e-8 * mean_diag.max(f64::MIN_POSITIVE);
    for _ in 0..6 {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += ridge;
        }
        if let Some(chol) = nalgebra::Cholesky::new(shifted) {
            return Some(chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum());
        }
        ridge *= 10.0;
    }
    None
}
