//! The fitting algorithm: penalized Newton inner loop, Nelder-Mead outer loop
//! over the covariance hyperparameters, convergence control and Wald
//! inference.
//!
//! Models without random effects take a single Newton pass on the
//! log-likelihood with the analytic gradient and Hessian. With random effects
//! the driver alternates (a) maximizing the penalized log-likelihood in
//! `(theta, b, psi_tilde)` for fixed `Sigma` and (b) maximizing the Laplace
//! marginal log-likelihood in the unconstrained covariance parameters, until
//! both objectives stabilize. The outer loop warm-starts the inner loop from
//! the previous estimates.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::{CovStructure, CovarianceSpec};
use crate::data::{self, SurveillanceData};
use crate::design::{
    assemble_design, Component, DesignMatrices, ModelFormula, ParameterState,
};
use crate::epidemiology;
use crate::error::{Error, Result};
use crate::likelihood::{self, LikelihoodContext};

/// Ridge escalation used when the observed Fisher matrix is not positive
/// definite during Newton steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgePolicy {
    pub initial: f64,
    pub factor: f64,
    pub max: f64,
}

impl Default for RidgePolicy {
    fn default() -> Self {
        Self {
            initial: 1e-8,
            factor: 10.0,
            max: 1e10,
        }
    }
}

/// Convergence thresholds and iteration caps.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Threshold on both the penalized-objective change and the max-norm of
    /// the score at inner convergence.
    pub inner_tol: f64,
    /// Threshold on the change of the marginal and penalized objectives
    /// across outer rounds.
    pub outer_tol: f64,
    pub max_inner_iter: usize,
    pub max_outer_iter: usize,
    pub ridge: RidgePolicy,
    /// Optional starting state (overrides the default initialization).
    pub init_state: Option<ParameterState>,
    /// Optional starting covariance hyperparameters `(log sigma.., r..)`.
    pub init_cov_hyper: Option<Vec<f64>>,
    pub verbose: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            inner_tol: 1e-6,
            outer_tol: 1e-5,
            max_inner_iter: 500,
            max_outer_iter: 100,
            ridge: RidgePolicy::default(),
            init_state: None,
            init_cov_hyper: None,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub inner_converged: bool,
    pub outer_converged: bool,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub final_grad_norm: f64,
    pub warnings: Vec<String>,
}

/// Seasonal wave summary of one harmonic of one component.
#[derive(Debug, Clone)]
pub struct AmplitudeSummary {
    pub component: Component,
    pub period: f64,
    pub harmonic: u32,
    pub amplitude: f64,
    pub phase: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FitSummaries {
    pub amplitudes: Vec<AmplitudeSummary>,
    /// Range over t of the dominant eigenvalue of the next-generation matrix.
    pub max_ev_range: Option<(f64, f64)>,
    /// `exp(beta_ar)` of the zero-inflation AR term: the factor by which one
    /// additional lagged case changes the odds of an excess zero.
    pub gamma_ar_odds_multiplier: Option<f64>,
}

/// Everything produced by a fit. Standard errors cover the fixed effects and
/// psi_tilde (indices `0..n_theta` and `n_theta+n_b..` of the packed order).
#[derive(Debug, Clone)]
pub struct FitResult {
    pub formula: ModelFormula,
    pub state: ParameterState,
    pub cov: CovarianceSpec,
    pub loglik: f64,
    pub penloglik: f64,
    pub marginal_loglik: Option<f64>,
    pub fisher: DMatrix<f64>,
    /// Standard errors aligned with `param_names`; NaN where unavailable.
    pub se: DVector<f64>,
    pub se_available: bool,
    pub param_names: Vec<String>,
    pub diagnostics: FitDiagnostics,
    pub summaries: FitSummaries,
}

impl FitResult {
    /// Estimates of theta and psi_tilde (the parameters with Wald inference),
    /// with their packed names and standard errors.
    pub fn inference_params(&self) -> Vec<(String, f64, f64)> {
        let n_theta = self.state.theta.len();
        let n_b = self.state.b.len();
        let mut out = Vec::new();
        for i in 0..n_theta {
            out.push((self.param_names[i].clone(), self.state.theta[i], self.se[i]));
        }
        for i in 0..self.state.psi_tilde.len() {
            let packed = n_theta + n_b + i;
            out.push((
                self.param_names[packed].clone(),
                self.state.psi_tilde[i],
                self.se[packed],
            ));
        }
        out
    }
}

/// `estimate +- z_(1+level)/2 * se`. A zero or unavailable SE collapses the
/// interval to the point estimate.
pub fn wald_interval(estimate: f64, se: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile((1.0 + level) / 2.0);
    if !se.is_finite() || se == 0.0 {
        return (estimate, estimate);
    }
    (estimate - z * se, estimate + z * se)
}

pub(crate) fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Wald confidence intervals for every theta and psi_tilde parameter, as
/// `(name, estimate, lower, upper)`.
pub fn wald_ci(result: &FitResult, level: f64) -> Result<Vec<(String, f64, f64, f64)>> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Domain(format!(
            "level must be in (0,1), got {level}"
        )));
    }
    Ok(result
        .inference_params()
        .into_iter()
        .map(|(name, est, se)| {
            let (lo, hi) = wald_interval(est, se, level);
            (name, est, lo, hi)
        })
        .collect())
}

/// Deterministic default initialization.
///
/// The endemic intercept starts at the log mean count per offset unit, the
/// epidemic intercepts at -1, the zero-inflation intercept at the logit of
/// the observed zero excess over what a moment-matched NB would produce;
/// coefficients, random effects and psi_tilde start at zero; covariance
/// hyperparameters start at `sigma = 0.3`, `r = 0`.
pub fn initialize(
    formula: &ModelFormula,
    design: &DesignMatrices,
) -> (ParameterState, CovarianceSpec, Vec<String>) {
    let lay = &design.layout;
    let mut warnings = Vec::new();
    let mut state = ParameterState::zeros(lay);

    for c in [Component::Lambda, Component::Phi] {
        if let Some(cl) = &lay.comp[c.index()] {
            state.theta[cl.alpha] = -1.0;
        }
    }
    if let Some(cl) = &lay.comp[Component::Nu.index()] {
        let nu = design.comps[Component::Nu.index()].as_ref().unwrap();
        let sum_y: f64 = design.y.iter().sum();
        let sum_off: f64 = nu.offset.iter().sum();
        let mut mean_per_offset = sum_y / sum_off;
        if !(mean_per_offset > 1e-4) {
            if sum_y == 0.0 {
                warnings.push(
                    "all counts are zero; flooring the endemic intercept at log(1e-4)".into(),
                );
            }
            mean_per_offset = 1e-4;
        }
        state.theta[cl.alpha] = mean_per_offset.ln();
    }
    if let Some(cl) = &lay.comp[Component::Gamma.index()] {
        let n = design.y.len() as f64;
        let zero_frac = design.y.iter().filter(|y| **y == 0.0).count() as f64 / n;
        let mean_y: f64 = design.y.iter().sum::<f64>() / n;
        // NB zero mass at the moment-matched mean under the psi = 1 start
        let nb_zero = 1.0 / (1.0 + mean_y);
        let excess = (zero_frac - nb_zero).max(0.05);
        state.theta[cl.alpha] = (excess / (1.0 - excess)).ln();
    }

    let re_comps = formula.re_components();
    let cov = match formula.re_structure {
        CovStructure::None => CovarianceSpec::none(),
        structure => {
            let c = re_comps.len();
            let n_r = if structure == CovStructure::Correlated {
                c * (c - 1) / 2
            } else {
                0
            };
            CovarianceSpec::new(
                structure,
                re_comps,
                design.n_units,
                vec![0.3f64.ln(); c],
                vec![0.0; n_r],
            )
            .expect("validated formula yields a valid covariance spec")
        }
    };
    (state, cov, warnings)
}

struct NewtonOutcome {
    z: DVector<f64>,
    objective: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    stalled: bool,
}

/// Maximizes a twice-differentiable objective by Newton steps with ridge
/// fallback and step halving (up to 20 halvings per step). `evaluate`
/// returns `None` for invalid points, which the line search treats as -inf.
fn newton_maximize(
    z0: DVector<f64>,
    mut derivs: impl FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)>,
    mut evaluate: impl FnMut(&DVector<f64>) -> Option<f64>,
    tol: f64,
    max_iter: usize,
    ridge: RidgePolicy,
) -> Result<NewtonOutcome> {
    let mut z = z0;
    let mut prev_obj: Option<f64> = None;
    let mut iterations = 0;
    loop {
        let (obj, score, fisher) = derivs(&z)?;
        let grad_norm = score.amax();
        let obj_delta = prev_obj.map_or(0.0, |p| (obj - p).abs());
        if grad_norm < tol && (prev_obj.is_none() || obj_delta < tol) {
            return Ok(NewtonOutcome {
                z,
                objective: obj,
                grad_norm,
                iterations,
                converged: true,
                stalled: false,
            });
        }
        if iterations >= max_iter {
            return Ok(NewtonOutcome {
                z,
                objective: obj,
                grad_norm,
                iterations,
                converged: false,
                stalled: false,
            });
        }
        let Some(direction) = newton_direction(&fisher, &score, ridge) else {
            return Ok(NewtonOutcome {
                z,
                objective: obj,
                grad_norm,
                iterations,
                converged: false,
                stalled: true,
            });
        };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=20 {
            let cand = &z + &direction * step;
            if let Some(v) = evaluate(&cand) {
                if v > obj {
                    z = cand;
                    prev_obj = Some(obj);
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            return Ok(NewtonOutcome {
                z,
                objective: obj,
                grad_norm,
                iterations,
                converged: false,
                stalled: true,
            });
        }
    }
}

/// Solves `(F + mu I) d = s` for an ascent direction, escalating `mu` until
/// the Cholesky factorization succeeds.
fn newton_direction(
    fisher: &DMatrix<f64>,
    score: &DVector<f64>,
    ridge: RidgePolicy,
) -> Option<DVector<f64>> {
    if let Some(chol) = nalgebra::Cholesky::new(fisher.clone()) {
        let d = chol.solve(score);
        if score.dot(&d) > 0.0 {
            return Some(d);
        }
    }
    let n = fisher.nrows();
    let scale =
        (fisher.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n.max(1) as f64).max(1e-12);
    let mut mu = ridge.initial * scale;
    while mu <= ridge.max * scale {
        let mut shifted = fisher.clone();
        for i in 0..n {
            shifted[(i, i)] += mu;
        }
        if let Some(chol) = nalgebra::Cholesky::new(shifted) {
            let d = chol.solve(score);
            if score.dot(&d) > 0.0 {
                return Some(d);
            }
        }
        mu *= ridge.factor;
    }
    None
}

/// Result of the inner penalized optimization.
pub struct InnerResult {
    pub state: ParameterState,
    pub penloglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
}

/// Maximizes the penalized log-likelihood in `(theta, b, psi_tilde)` for a
/// fixed covariance. Accepted steps never decrease the objective; converged
/// means both the objective change and the score max-norm fell below
/// `inner_tol`.
pub fn inner_step(
    state: &ParameterState,
    cov: &CovarianceSpec,
    ctx: &LikelihoodContext,
    opts: &FitOptions,
) -> Result<InnerResult> {
    let layout = ctx.design.layout.clone();
    let outcome = newton_maximize(
        state.pack(),
        |z| {
            let s = ParameterState::unpack(&layout, z)?;
            likelihood::score_fisher_pen(&s, cov, ctx)
        },
        |z| {
            let s = ParameterState::unpack(&layout, z).ok()?;
            likelihood::penloglik(&s, cov, ctx).ok()
        },
        opts.inner_tol,
        opts.max_inner_iter,
        opts.ridge,
    )?;
    Ok(InnerResult {
        state: ParameterState::unpack(&layout, &outcome.z)?,
        penloglik: outcome.objective,
        grad_norm: outcome.grad_norm,
        iterations: outcome.iterations,
        converged: outcome.converged,
        stalled: outcome.stalled,
    })
}

/// Nelder-Mead maximization with the standard reflection/expansion/
/// contraction/shrink coefficients (1, 2, 0.5, 0.5) and one restart from the
/// incumbent with a fresh simplex. `-inf` marks rejected points.
fn nelder_mead_max(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    initial_step: f64,
    f_tol: f64,
    max_evals: usize,
) -> (Vec<f64>, f64) {
    let mut best = (x0.to_vec(), f(x0));
    for _restart in 0..2 {
        let (x, v) = nelder_mead_run(f, &best.0, initial_step, f_tol, max_evals);
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

fn nelder_mead_run(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    initial_step: f64,
    f_tol: f64,
    max_evals: usize,
) -> (Vec<f64>, f64) {
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        f(x)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), eval(x0, &mut evals)));
    for i in 0..dim {
        let mut p = x0.to_vec();
        p[i] += initial_step;
        let v = eval(&p, &mut evals);
        simplex.push((p, v));
    }

    while evals < max_evals {
        // descending by objective (maximization)
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let best_v = simplex[0].1;
        let worst_v = simplex[dim].1;
        if best_v.is_finite() && worst_v.is_finite() && (best_v - worst_v).abs() < f_tol {
            break;
        }

        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(p, _)| p[j]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].0.clone();
        let reflect: Vec<f64> = (0..dim)
            .map(|j| centroid[j] + ALPHA * (centroid[j] - worst[j]))
            .collect();
        let f_r = eval(&reflect, &mut evals);

        if f_r > simplex[0].1 {
            let expand: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + GAMMA * (reflect[j] - centroid[j]))
                .collect();
            let f_e = eval(&expand, &mut evals);
            simplex[dim] = if f_e > f_r {
                (expand, f_e)
            } else {
                (reflect, f_r)
            };
        } else if f_r > simplex[dim - 1].1 {
            simplex[dim] = (reflect, f_r);
        } else {
            let contract: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + RHO * (worst[j] - centroid[j]))
                .collect();
            let f_c = eval(&contract, &mut evals);
            if f_c > simplex[dim].1 {
                simplex[dim] = (contract, f_c);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    for j in 0..dim {
                        entry.0[j] = best[j] + SIGMA * (entry.0[j] - best[j]);
                    }
                    entry.1 = eval(&entry.0, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex.swap_remove(0)
}

/// One covariance update: Nelder-Mead on the marginal log-likelihood over
/// `(log sigma, r)` at the current inner estimates. Returns the updated
/// spec, its marginal value, and whether every proposal was rejected.
pub fn outer_step(
    cov: &CovarianceSpec,
    state: &ParameterState,
    ctx: &LikelihoodContext,
    opts: &FitOptions,
) -> Result<(CovarianceSpec, f64, bool)> {
    let f0 = likelihood::fisher_unpenalized(state, ctx)?;
    let template = cov.clone();
    let mut objective = |hyper: &[f64]| -> f64 {
        let Ok(proposal) = template.with_hyper(hyper) else {
            return f64::NEG_INFINITY;
        };
        likelihood::marginal_loglik_from_f0(&proposal, state, ctx, &f0)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let x0 = cov.pack_hyper();
    let dim = x0.len();
    let (x_best, f_best) = nelder_mead_max(
        &mut objective,
        &x0,
        0.25,
        (opts.outer_tol * 1e-2).max(1e-10),
        400 * dim.max(1),
    );
    if f_best == f64::NEG_INFINITY {
        return Ok((cov.clone(), f_best, true));
    }
    Ok((template.with_hyper(&x_best)?, f_best, false))
}

/// Fits `formula` to `data`: validation, design assembly, initialization,
/// the inner/outer optimization, and Wald/summary post-processing.
///
/// Non-convergence is not an error: the result carries diagnostics and a
/// `converged` flag. Configuration problems (unknown covariates,
/// inconsistent formula) and invalid data are errors.
pub fn fit(
    formula: &ModelFormula,
    data: &SurveillanceData,
    opts: &FitOptions,
) -> Result<FitResult> {
    let report = data::validate(data);
    if !report.passed() {
        return Err(Error::InvalidData(report.violations.join("; ")));
    }
    let weights = data::build_weights(&data.adjacency, formula.normalize_weights)?;
    let design = assemble_design(formula, data, &weights)?;
    fit_assembled(formula, &design, opts)
}

/// Fit against a pre-assembled design (the rolling-forecast path reuses this
/// to avoid re-validating shared data).
pub fn fit_assembled(
    formula: &ModelFormula,
    design: &DesignMatrices,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_in_context(formula, design, &LikelihoodContext::new(design), opts)
}

pub(crate) fn fit_in_context(
    formula: &ModelFormula,
    design: &DesignMatrices,
    ctx: &LikelihoodContext,
    opts: &FitOptions,
) -> Result<FitResult> {
    let (mut state, mut cov, warnings) = initialize(formula, design);
    if let Some(init) = &opts.init_state {
        if init.theta.len() == state.theta.len()
            && init.b.len() == state.b.len()
            && init.psi_tilde.len() == state.psi_tilde.len()
        {
            state = init.clone();
        } else {
            return Err(Error::Dim(
                "init_state dimensions do not match the model layout".into(),
            ));
        }
    }
    if let Some(hyper) = &opts.init_cov_hyper {
        cov = cov.with_hyper(hyper)?;
    }

    let mut diagnostics = FitDiagnostics {
        warnings,
        ..Default::default()
    };

    let mut lpen;
    let mut lmarg = None;
    if cov.structure == CovStructure::None {
        let inner = inner_step(&state, &cov, ctx, opts)?;
        state = inner.state;
        lpen = inner.penloglik;
        diagnostics.inner_iterations = inner.iterations;
        diagnostics.inner_converged = inner.converged;
        diagnostics.outer_converged = true;
        diagnostics.final_grad_norm = inner.grad_norm;
        if inner.stalled {
            diagnostics.warnings.push("inner line search stalled".into());
        }
    } else {
        let mut prev_lpen = f64::NEG_INFINITY;
        let mut prev_lmarg = f64::NEG_INFINITY;
        let mut rounds = 0usize;
        loop {
            let inner = inner_step(&state, &cov, ctx, opts)?;
            state = inner.state;
            lpen = inner.penloglik;
            diagnostics.inner_iterations += inner.iterations;
            diagnostics.inner_converged = inner.converged;
            diagnostics.final_grad_norm = inner.grad_norm;
            if inner.stalled {
                diagnostics
                    .warnings
                    .push(format!("inner line search stalled in outer round {rounds}"));
            }

            let (new_cov, marg, outer_stalled) = outer_step(&cov, &state, ctx, opts)?;
            if outer_stalled {
                diagnostics
                    .warnings
                    .push("all covariance proposals rejected (singular Fisher)".into());
            }
            cov = new_cov;
            rounds += 1;

            let converged_now = rounds > 1
                && (lpen - prev_lpen).abs() < opts.outer_tol
                && (marg - prev_lmarg).abs() < opts.outer_tol;
            prev_lpen = lpen;
            prev_lmarg = marg;
            if converged_now || rounds >= opts.max_outer_iter {
                diagnostics.outer_converged = converged_now;
                break;
            }
        }
        diagnostics.outer_iterations = rounds;
        // final inner polish under the final covariance
        let inner = inner_step(&state, &cov, ctx, opts)?;
        state = inner.state;
        lpen = inner.penloglik;
        diagnostics.inner_iterations += inner.iterations;
        diagnostics.inner_converged = inner.converged;
        diagnostics.final_grad_norm = inner.grad_norm;
        lmarg = Some(likelihood::marginal_loglik(&cov, &state, ctx)?);
    }
    diagnostics.converged = diagnostics.inner_converged && diagnostics.outer_converged;

    let loglik = likelihood::loglik(&state, ctx)?;
    let fisher = likelihood::fisher_pen(&state, &cov, ctx)?;
    let n = fisher.nrows();
    let mut se = DVector::from_element(n, f64::NAN);
    let mut se_available = false;
    if let Some(chol) = nalgebra::Cholesky::new(fisher.clone()) {
        let inv = chol.inverse();
        for i in 0..n {
            se[i] = inv[(i, i)].max(0.0).sqrt();
        }
        se_available = true;
    } else {
        diagnostics.warnings.push(
            "Fisher information not positive definite at the optimum; no standard errors".into(),
        );
    }

    let summaries = summarize(formula, design, &state)?;
    Ok(FitResult {
        formula: formula.clone(),
        state,
        cov,
        loglik,
        penloglik: lpen,
        marginal_loglik: lmarg,
        fisher,
        se,
        se_available,
        param_names: design.param_names(),
        diagnostics,
        summaries,
    })
}

fn summarize(
    formula: &ModelFormula,
    design: &DesignMatrices,
    state: &ParameterState,
) -> Result<FitSummaries> {
    let lay = &design.layout;
    let mut summaries = FitSummaries::default();

    for c in Component::ALL {
        let (Some(spec), Some(cl)) = (formula.component(c), &lay.comp[c.index()]) else {
            continue;
        };
        // seasonal columns sit right after the covariates, as sin/cos pairs
        let mut col = spec.covariates.len();
        for h in &spec.seasonality {
            for s in 1..=h.harmonics {
                let delta = state.theta[cl.beta.start + col];
                let zeta = state.theta[cl.beta.start + col + 1];
                let (amplitude, phase) = data::amplitude_phase(delta, zeta);
                summaries.amplitudes.push(AmplitudeSummary {
                    component: c,
                    period: h.period,
                    harmonic: s,
                    amplitude,
                    phase,
                });
                col += 2;
            }
        }
    }

    if formula.lambda.is_some() {
        let surf = design.eval_predictors(state)?;
        let lambda = surf.lambda.as_ref().unwrap();
        let rr = design.n_units;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 2..=design.n_time {
            let start = design.cell_index(t, 0);
            let lam_t = &lambda[start..start + rr];
            let gam_t = surf.gamma.as_ref().map(|g| &g[start..start + rr]);
            let rt = if let Some(phi) = surf.phi.as_ref() {
                let phi_t = &phi[start..start + rr];
                let ng = epidemiology::build_next_gen(
                    Some(lam_t),
                    Some(phi_t),
                    gam_t,
                    &design.weights,
                )?;
                epidemiology::reproduction_number(&ng)
            } else {
                epidemiology::reproduction_number_no_nbr(lam_t, gam_t)
            };
            lo = lo.min(rt);
            hi = hi.max(rt);
        }
        summaries.max_ev_range = Some((lo, hi));
    }

    if let (Some(spec), Some(cl), Some(cd)) = (
        formula.component(Component::Gamma),
        &lay.comp[Component::Gamma.index()],
        &design.comps[Component::Gamma.index()],
    ) {
        if spec.ar_lag {
            let ar_col = cd.ar_col.expect("ar_lag implies an ar column");
            let beta_ar = state.theta[cl.beta.start + ar_col - 1];
            summaries.gamma_ar_odds_multiplier = Some(beta_ar.exp());
        }
    }
    Ok(summaries)
}
