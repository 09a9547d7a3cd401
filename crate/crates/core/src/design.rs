//! Model formulas, design matrices, parameter packing and predictor
//! evaluation.
//!
//! The conditional mean decomposes as
//! `mu_rt = lambda_rt * y_{r,t-1} + phi_rt * sum_q w_qr y_{q,t-1} + nu_rt`,
//! with each included component log-linear in an intercept, covariates,
//! seasonal harmonics, an optional offset and an optional unit random
//! intercept. The zero-inflation probability `gamma_rt` is logit-linear and
//! may additionally carry the lagged count as a covariate.
//!
//! Likelihood rows start at t = 2: the first period only provides the lag.

use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::covariance::CovStructure;
use crate::data::{seasonal_covariates, SurveillanceData, WeightMatrix};
use crate::error::{Error, Result};

/// Cap on the zero-inflation linear predictor before the logistic link, so the
/// mixture log-pmf stays finite. Gradient contributions in the clamped region
/// are zero by construction.
pub const GAMMA_CLAMP: f64 = 30.0;

/// The four component predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Lambda,
    Phi,
    Nu,
    Gamma,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Lambda,
        Component::Phi,
        Component::Nu,
        Component::Gamma,
    ];

    pub fn index(self) -> usize {
        match self {
            Component::Lambda => 0,
            Component::Phi => 1,
            Component::Nu => 2,
            Component::Gamma => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Lambda => "lambda",
            Component::Phi => "phi",
            Component::Nu => "nu",
            Component::Gamma => "gamma",
        }
    }
}

/// One seasonal block: `harmonics` sine/cosine pairs at multiples of
/// `2 pi / period`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonics {
    pub period: f64,
    pub harmonics: u32,
}

/// Specification of one component predictor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentSpec {
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub seasonality: Vec<Harmonics>,
    #[serde(default)]
    pub offset: Option<String>,
    #[serde(default)]
    pub random_intercept: bool,
    /// Include `y_{r,t-1}` as a covariate (zero-inflation component only).
    #[serde(default)]
    pub ar_lag: bool,
}

impl ComponentSpec {
    pub fn intercept_only() -> Self {
        Self::default()
    }
}

/// Overdispersion layout: absent (Poisson), one shared psi, or one per unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiSpec {
    None,
    Shared,
    UnitSpecific,
}

/// Declarative description of the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFormula {
    #[serde(default)]
    pub lambda: Option<ComponentSpec>,
    #[serde(default)]
    pub phi: Option<ComponentSpec>,
    #[serde(default)]
    pub nu: Option<ComponentSpec>,
    #[serde(default)]
    pub gamma: Option<ComponentSpec>,
    pub psi: PsiSpec,
    #[serde(default = "default_re_structure")]
    pub re_structure: CovStructure,
    #[serde(default = "default_true")]
    pub normalize_weights: bool,
}

fn default_re_structure() -> CovStructure {
    CovStructure::None
}

fn default_true() -> bool {
    true
}

impl ModelFormula {
    pub fn component(&self, c: Component) -> Option<&ComponentSpec> {
        match c {
            Component::Lambda => self.lambda.as_ref(),
            Component::Phi => self.phi.as_ref(),
            Component::Nu => self.nu.as_ref(),
            Component::Gamma => self.gamma.as_ref(),
        }
    }

    pub fn has_zero_inflation(&self) -> bool {
        self.gamma.is_some()
    }

    /// Components with a random intercept, in fixed component order.
    pub fn re_components(&self) -> Vec<Component> {
        Component::ALL
            .iter()
            .copied()
            .filter(|c| self.component(*c).is_some_and(|s| s.random_intercept))
            .collect()
    }

    /// Internal consistency checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_none() && self.phi.is_none() && self.nu.is_none() {
            return Err(Error::Config(
                "at least one of the lambda, phi, nu components must be included".into(),
            ));
        }
        for c in [Component::Lambda, Component::Phi, Component::Nu] {
            if self.component(c).is_some_and(|s| s.ar_lag) {
                return Err(Error::Config(format!(
                    "ar_lag is only available in the gamma component, not {}",
                    c.name()
                )));
            }
        }
        if self.gamma.as_ref().is_some_and(|s| s.offset.is_some()) {
            return Err(Error::Config(
                "the gamma component has a logit link and takes no offset".into(),
            ));
        }
        let n_re = self.re_components().len();
        match self.re_structure {
            CovStructure::None => {
                if n_re > 0 {
                    return Err(Error::Config(
                        "random intercepts requested but re_structure is 'none'".into(),
                    ));
                }
            }
            CovStructure::Uncorrelated => {
                if n_re == 0 {
                    return Err(Error::Config(
                        "re_structure 'uncorrelated' needs at least one random intercept".into(),
                    ));
                }
            }
            CovStructure::Correlated => {
                if n_re < 2 {
                    return Err(Error::Config(
                        "re_structure 'correlated' needs at least two random-intercept components"
                            .into(),
                    ));
                }
            }
        }
        for h in Component::ALL
            .iter()
            .filter_map(|c| self.component(*c))
            .flat_map(|s| &s.seasonality)
        {
            if !(h.period > 1.0) || h.harmonics == 0 {
                return Err(Error::Config(format!(
                    "seasonality needs period > 1 and harmonics >= 1, got period {} harmonics {}",
                    h.period, h.harmonics
                )));
            }
        }
        Ok(())
    }
}

/// Where one component's coefficients sit in the packed parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompLayout {
    /// Packed index of the intercept.
    pub alpha: usize,
    /// Packed indices of the covariate/seasonal/lag coefficients.
    pub beta: Range<usize>,
    /// Offset of this component's block inside the b vector, when present.
    pub b_off: Option<usize>,
}

/// Deterministic packing of `(theta, b, psi_tilde)` into one vector:
/// all intercepts in component order, then all beta blocks in component
/// order, then the random-effect blocks (length R each), then psi_tilde.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedLayout {
    pub comp: [Option<CompLayout>; 4],
    pub psi: PsiSpec,
    pub n_theta: usize,
    pub n_b: usize,
    pub n_psi: usize,
    pub n_units: usize,
}

impl PackedLayout {
    pub fn total_len(&self) -> usize {
        self.n_theta + self.n_b + self.n_psi
    }

    /// Packed index of `b_r` for a component; panics if the component has no
    /// random intercept.
    pub fn b_index(&self, c: Component, r: usize) -> usize {
        let off = self.comp[c.index()]
            .as_ref()
            .and_then(|l| l.b_off)
            .expect("component has no random intercept");
        self.n_theta + off + r
    }

    /// Packed index of the psi_tilde entry relevant for unit `r`.
    pub fn psi_index(&self, r: usize) -> Option<usize> {
        match self.psi {
            PsiSpec::None => None,
            PsiSpec::Shared => Some(self.n_theta + self.n_b),
            PsiSpec::UnitSpecific => Some(self.n_theta + self.n_b + r),
        }
    }
}

/// Fixed and random effects plus transformed overdispersion, packed per a
/// [`PackedLayout`]. Covariance hyperparameters live in
/// [`crate::covariance::CovarianceSpec`], the outer optimizer's coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub theta: DVector<f64>,
    pub b: DVector<f64>,
    /// `psi_tilde_r = -log(psi_r)`; empty for Poisson models.
    pub psi_tilde: DVector<f64>,
}

impl ParameterState {
    pub fn zeros(layout: &PackedLayout) -> Self {
        Self {
            theta: DVector::zeros(layout.n_theta),
            b: DVector::zeros(layout.n_b),
            psi_tilde: DVector::zeros(layout.n_psi),
        }
    }

    pub fn pack(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.theta.len() + self.b.len() + self.psi_tilde.len());
        z.rows_mut(0, self.theta.len()).copy_from(&self.theta);
        z.rows_mut(self.theta.len(), self.b.len()).copy_from(&self.b);
        z.rows_mut(self.theta.len() + self.b.len(), self.psi_tilde.len())
            .copy_from(&self.psi_tilde);
        z
    }

    pub fn unpack(layout: &PackedLayout, z: &DVector<f64>) -> Result<Self> {
        if z.len() != layout.total_len() {
            return Err(Error::Dim(format!(
                "packed state must have {} entries, got {}",
                layout.total_len(),
                z.len()
            )));
        }
        Ok(Self {
            theta: z.rows(0, layout.n_theta).into_owned(),
            b: z.rows(layout.n_theta, layout.n_b).into_owned(),
            psi_tilde: z.rows(layout.n_theta + layout.n_b, layout.n_psi).into_owned(),
        })
    }

    /// Overdispersion `psi_r = exp(-psi_tilde_r)`; 0 for Poisson models.
    pub fn psi(&self, layout: &PackedLayout, r: usize) -> f64 {
        match layout.psi {
            PsiSpec::None => 0.0,
            PsiSpec::Shared => (-self.psi_tilde[0]).exp(),
            PsiSpec::UnitSpecific => (-self.psi_tilde[r]).exp(),
        }
    }
}

/// Assembled design for one component: row-major `n_cells x n_cols` matrix
/// whose first column is the intercept; the gamma component may carry the
/// lagged count in column `ar_col`.
#[derive(Debug, Clone)]
pub struct CompDesign {
    pub x: Vec<f64>,
    pub n_cols: usize,
    pub ar_col: Option<usize>,
    pub offset: Vec<f64>,
    pub random_intercept: bool,
    pub col_names: Vec<String>,
}

/// Design matrices for all included components over the model rows
/// (t = 2..T, all units), plus the lagged data the mean needs.
///
/// Cells are indexed `(t - 2) * R + r` with `r` 0-based; the column order is
/// intercept, covariates in formula order, seasonal pairs in block order,
/// then the AR lag.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub n_units: usize,
    /// T, the number of observed periods (model rows cover t = 2..T).
    pub n_time: usize,
    pub comps: [Option<CompDesign>; 4],
    pub layout: PackedLayout,
    pub weights: WeightMatrix,
    /// `y_{r,t-1}` per cell.
    pub y_prev: Vec<f64>,
    /// `sum_q w_qr y_{q,t-1}` per cell.
    pub nbr_prev: Vec<f64>,
    /// `y_rt` per cell (the response).
    pub y: Vec<f64>,
}

/// Component surfaces over all cells, on the natural scales.
#[derive(Debug, Clone)]
pub struct Surfaces {
    pub lambda: Option<Vec<f64>>,
    pub phi: Option<Vec<f64>>,
    pub nu: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    /// Clamped logit-scale predictor of gamma.
    pub gamma_x: Option<Vec<f64>>,
    /// Cells where the gamma predictor hit the clamp (their gamma gradient
    /// is exactly zero).
    pub gamma_clamped: Option<Vec<bool>>,
    pub mu: Vec<f64>,
}

/// Logistic function and its first two derivatives, saturating cleanly for
/// large |x|: `g'' = g'(1 - 2g)`.
pub fn logistic_derivs(x: f64) -> (f64, f64, f64) {
    let g = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    let g1 = g * (1.0 - g);
    let g2 = g1 * (1.0 - 2.0 * g);
    (g, g1, g2)
}

fn build_layout(formula: &ModelFormula, n_beta: &[usize; 4], n_units: usize) -> PackedLayout {
    let mut comp: [Option<CompLayout>; 4] = [None, None, None, None];
    let included: Vec<Component> = Component::ALL
        .iter()
        .copied()
        .filter(|c| formula.component(*c).is_some())
        .collect();
    let n_alpha = included.len();
    let mut beta_cursor = n_alpha;
    let mut b_cursor = 0usize;
    for (i, c) in included.iter().enumerate() {
        let nb = n_beta[c.index()];
        let b_off = if formula.component(*c).unwrap().random_intercept {
            let off = b_cursor;
            b_cursor += n_units;
            Some(off)
        } else {
            None
        };
        comp[c.index()] = Some(CompLayout {
            alpha: i,
            beta: beta_cursor..beta_cursor + nb,
            b_off,
        });
        beta_cursor += nb;
    }
    let n_psi = match formula.psi {
        PsiSpec::None => 0,
        PsiSpec::Shared => 1,
        PsiSpec::UnitSpecific => n_units,
    };
    PackedLayout {
        comp,
        psi: formula.psi,
        n_theta: beta_cursor,
        n_b: b_cursor,
        n_psi,
        n_units,
    }
}

/// Builds the design matrices for `formula` against `data`.
///
/// Deterministic: the column order is recorded in `col_names` and the packed
/// parameter order in `layout`. Fails when a named covariate or offset is
/// missing.
pub fn assemble_design(
    formula: &ModelFormula,
    data: &SurveillanceData,
    weights: &WeightMatrix,
) -> Result<DesignMatrices> {
    formula.validate()?;
    let n_units = data.n_units();
    let n_time = data.n_time();
    if n_time < 2 {
        return Err(Error::InvalidData(
            "need at least 2 periods to form lagged rows".into(),
        ));
    }
    if weights.w.nrows() != n_units {
        return Err(Error::Dim(format!(
            "weight matrix is {}x{}, data has {} units",
            weights.w.nrows(),
            weights.w.ncols(),
            n_units
        )));
    }
    let n_cells = n_units * (n_time - 1);

    let mut y_prev = vec![0.0; n_cells];
    let mut nbr_prev = vec![0.0; n_cells];
    let mut y = vec![0.0; n_cells];
    for t in 2..=n_time {
        for r in 0..n_units {
            let cell = (t - 2) * n_units + r;
            y[cell] = data.counts[(t - 1, r)];
            y_prev[cell] = data.counts[(t - 2, r)];
            let mut s = 0.0;
            for q in 0..n_units {
                s += weights.w[(q, r)] * data.counts[(t - 2, q)];
            }
            nbr_prev[cell] = s;
        }
    }

    let mut comps: [Option<CompDesign>; 4] = [None, None, None, None];
    let mut n_beta = [0usize; 4];
    for c in Component::ALL {
        let Some(spec) = formula.component(c) else {
            continue;
        };
        let mut col_names = vec!["intercept".to_string()];
        for name in &spec.covariates {
            if !data.covariates.contains_key(name) {
                return Err(Error::Config(format!(
                    "component {} references unknown covariate '{name}'",
                    c.name()
                )));
            }
            col_names.push(name.clone());
        }
        for h in &spec.seasonality {
            for s in 1..=h.harmonics {
                col_names.push(format!("sin(2pi*{s}t/{})", h.period));
                col_names.push(format!("cos(2pi*{s}t/{})", h.period));
            }
        }
        let ar_col = if spec.ar_lag {
            col_names.push("ar_lag".to_string());
            Some(col_names.len() - 1)
        } else {
            None
        };
        let n_cols = col_names.len();
        n_beta[c.index()] = n_cols - 1;

        let offset_matrix = match &spec.offset {
            Some(name) => Some(data.offsets.get(name).ok_or_else(|| {
                Error::Config(format!(
                    "component {} references unknown offset '{name}'",
                    c.name()
                ))
            })?),
            None => None,
        };

        let mut x = vec![0.0; n_cells * n_cols];
        let mut offset = vec![1.0; n_cells];
        for t in 2..=n_time {
            for r in 0..n_units {
                let cell = (t - 2) * n_units + r;
                let row = &mut x[cell * n_cols..(cell + 1) * n_cols];
                row[0] = 1.0;
                let mut col = 1;
                for name in &spec.covariates {
                    row[col] = data.covariates[name][(t - 1, r)];
                    col += 1;
                }
                for h in &spec.seasonality {
                    for v in seasonal_covariates(t, h.harmonics, h.period) {
                        row[col] = v;
                        col += 1;
                    }
                }
                if spec.ar_lag {
                    row[col] = y_prev[cell];
                }
                if let Some(m) = offset_matrix {
                    offset[cell] = m[(t - 1, r)];
                }
            }
        }
        comps[c.index()] = Some(CompDesign {
            x,
            n_cols,
            ar_col,
            offset,
            random_intercept: spec.random_intercept,
            col_names,
        });
    }

    let layout = build_layout(formula, &n_beta, n_units);
    Ok(DesignMatrices {
        n_units,
        n_time,
        comps,
        layout,
        weights: weights.clone(),
        y_prev,
        nbr_prev,
        y,
    })
}

impl DesignMatrices {
    pub fn n_cells(&self) -> usize {
        self.n_units * (self.n_time - 1)
    }

    pub fn cell_index(&self, t: usize, r: usize) -> usize {
        debug_assert!((2..=self.n_time).contains(&t) && r < self.n_units);
        (t - 2) * self.n_units + r
    }

    /// 1-based (unit, time) of a cell, for error reporting.
    pub fn cell_location(&self, cell: usize) -> (usize, usize) {
        (cell % self.n_units + 1, cell / self.n_units + 2)
    }

    /// Human-readable names of every packed parameter, in packed order.
    pub fn param_names(&self) -> Vec<String> {
        let lay = &self.layout;
        let mut names = vec![String::new(); lay.total_len()];
        for c in Component::ALL {
            let (Some(cl), Some(cd)) = (&lay.comp[c.index()], &self.comps[c.index()]) else {
                continue;
            };
            names[cl.alpha] = format!("alpha({})", c.name());
            for (j, idx) in cl.beta.clone().enumerate() {
                names[idx] = format!("beta({}):{}", c.name(), cd.col_names[j + 1]);
            }
            if let Some(off) = cl.b_off {
                for r in 0..lay.n_units {
                    names[lay.n_theta + off + r] = format!("b({}):{}", c.name(), r + 1);
                }
            }
        }
        match lay.psi {
            PsiSpec::None => {}
            PsiSpec::Shared => names[lay.n_theta + lay.n_b] = "psi_tilde".to_string(),
            PsiSpec::UnitSpecific => {
                for r in 0..lay.n_units {
                    names[lay.n_theta + lay.n_b + r] = format!("psi_tilde:{}", r + 1);
                }
            }
        }
        names
    }

    /// Linear predictor of one component at one cell; `y_prev_override`
    /// substitutes the AR-lag column (simulation and forecasting feed counts
    /// that are not the ones stored at assembly time).
    fn lin_pred(
        &self,
        c: Component,
        state: &ParameterState,
        cell: usize,
        y_prev_override: Option<f64>,
    ) -> f64 {
        let cd = self.comps[c.index()].as_ref().expect("component present");
        let cl = self.layout.comp[c.index()].as_ref().expect("layout present");
        let row = &cd.x[cell * cd.n_cols..(cell + 1) * cd.n_cols];
        let mut lin = state.theta[cl.alpha];
        for (j, idx) in cl.beta.clone().enumerate() {
            lin += state.theta[idx] * row[j + 1];
        }
        if let (Some(ar), Some(y_sub)) = (cd.ar_col, y_prev_override) {
            let beta_ar = state.theta[cl.beta.start + ar - 1];
            lin += beta_ar * (y_sub - row[ar]);
        }
        if let Some(off) = cl.b_off {
            lin += state.b[off + cell % self.n_units];
        }
        lin
    }

    /// Evaluates all component surfaces and the conditional mean over every
    /// cell, using the observed lags.
    pub fn eval_predictors(&self, state: &ParameterState) -> Result<Surfaces> {
        self.check_state(state)?;
        let n = self.n_cells();
        let mut surf = Surfaces {
            lambda: None,
            phi: None,
            nu: None,
            gamma: None,
            gamma_x: None,
            gamma_clamped: None,
            mu: vec![0.0; n],
        };
        for c in [Component::Lambda, Component::Phi, Component::Nu] {
            if self.comps[c.index()].is_none() {
                continue;
            }
            let cd = self.comps[c.index()].as_ref().unwrap();
            let mut vals = vec![0.0; n];
            for cell in 0..n {
                let lin = self.lin_pred(c, state, cell, None);
                let v = cd.offset[cell] * lin.exp();
                if !v.is_finite() {
                    let (unit, time) = self.cell_location(cell);
                    return Err(Error::Numeric {
                        unit,
                        time,
                        msg: format!("non-finite {} predictor", c.name()),
                    });
                }
                vals[cell] = v;
            }
            let weight_on_mu: &[f64] = match c {
                Component::Lambda => &self.y_prev,
                Component::Phi => &self.nbr_prev,
                _ => &[],
            };
            for cell in 0..n {
                let mult = if weight_on_mu.is_empty() {
                    1.0
                } else {
                    weight_on_mu[cell]
                };
                surf.mu[cell] += vals[cell] * mult;
            }
            match c {
                Component::Lambda => surf.lambda = Some(vals),
                Component::Phi => surf.phi = Some(vals),
                Component::Nu => surf.nu = Some(vals),
                Component::Gamma => unreachable!(),
            }
        }
        if self.comps[Component::Gamma.index()].is_some() {
            let mut gamma = vec![0.0; n];
            let mut gamma_x = vec![0.0; n];
            let mut clamped = vec![false; n];
            for cell in 0..n {
                let lin = self.lin_pred(Component::Gamma, state, cell, None);
                if !lin.is_finite() {
                    let (unit, time) = self.cell_location(cell);
                    return Err(Error::Numeric {
                        unit,
                        time,
                        msg: "non-finite gamma predictor".into(),
                    });
                }
                let x = lin.clamp(-GAMMA_CLAMP, GAMMA_CLAMP);
                clamped[cell] = lin.abs() > GAMMA_CLAMP;
                gamma_x[cell] = x;
                gamma[cell] = logistic_derivs(x).0;
            }
            surf.gamma = Some(gamma);
            surf.gamma_x = Some(gamma_x);
            surf.gamma_clamped = Some(clamped);
        }
        Ok(surf)
    }

    /// Per-unit predictor values at a single time `t` given an external lag
    /// vector `y_prev` (length R). Returns `(lambda, phi, nu, gamma, mu)`,
    /// each `None` when the component is absent.
    #[allow(clippy::type_complexity)]
    pub fn eval_at(
        &self,
        state: &ParameterState,
        t: usize,
        y_prev: &[f64],
    ) -> Result<(
        Option<Vec<f64>>,
        Option<Vec<f64>>,
        Option<Vec<f64>>,
        Option<Vec<f64>>,
        Vec<f64>,
    )> {
        self.check_state(state)?;
        if !(2..=self.n_time).contains(&t) {
            return Err(Error::Dim(format!(
                "time {t} outside the model rows 2..={}",
                self.n_time
            )));
        }
        if y_prev.len() != self.n_units {
            return Err(Error::Dim(format!(
                "y_prev must have {} entries, got {}",
                self.n_units,
                y_prev.len()
            )));
        }
        let rr = self.n_units;
        let mut mu = vec![0.0; rr];
        let mut out: [Option<Vec<f64>>; 4] = [None, None, None, None];
        for c in [Component::Lambda, Component::Phi, Component::Nu] {
            let Some(cd) = self.comps[c.index()].as_ref() else {
                continue;
            };
            let mut vals = vec![0.0; rr];
            for r in 0..rr {
                let cell = self.cell_index(t, r);
                let lin = self.lin_pred(c, state, cell, None);
                vals[r] = cd.offset[cell] * lin.exp();
                if !vals[r].is_finite() {
                    return Err(Error::Numeric {
                        unit: r + 1,
                        time: t,
                        msg: format!("non-finite {} predictor", c.name()),
                    });
                }
            }
            for r in 0..rr {
                mu[r] += match c {
                    Component::Lambda => vals[r] * y_prev[r],
                    Component::Phi => {
                        let mut s = 0.0;
                        for q in 0..rr {
                            s += self.weights.w[(q, r)] * y_prev[q];
                        }
                        vals[r] * s
                    }
                    Component::Nu => vals[r],
                    Component::Gamma => unreachable!(),
                };
            }
            out[c.index()] = Some(vals);
        }
        if self.comps[Component::Gamma.index()].is_some() {
            let mut vals = vec![0.0; rr];
            for r in 0..rr {
                let cell = self.cell_index(t, r);
                let lin = self.lin_pred(Component::Gamma, state, cell, Some(y_prev[r]));
                if !lin.is_finite() {
                    return Err(Error::Numeric {
                        unit: r + 1,
                        time: t,
                        msg: "non-finite gamma predictor".into(),
                    });
                }
                vals[r] = logistic_derivs(lin.clamp(-GAMMA_CLAMP, GAMMA_CLAMP)).0;
            }
            out[Component::Gamma.index()] = Some(vals);
        }
        let [lambda, phi, nu, gamma] = out;
        Ok((lambda, phi, nu, gamma, mu))
    }

    fn check_state(&self, state: &ParameterState) -> Result<()> {
        let lay = &self.layout;
        if state.theta.len() != lay.n_theta
            || state.b.len() != lay.n_b
            || state.psi_tilde.len() != lay.n_psi
        {
            return Err(Error::Dim(format!(
                "state dimensions ({}, {}, {}) do not match layout ({}, {}, {})",
                state.theta.len(),
                state.b.len(),
                state.psi_tilde.len(),
                lay.n_theta,
                lay.n_b,
                lay.n_psi
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_weights;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use std::collections::BTreeMap;

    fn toy_data(t: usize, r: usize) -> SurveillanceData {
        let mut counts = DMatrix::zeros(t, r);
        for i in 0..t {
            for j in 0..r {
                counts[(i, j)] = ((i * 7 + j * 3) % 5) as f64;
            }
        }
        let mut adjacency = DMatrix::zeros(r, r);
        for j in 0..r.saturating_sub(1) {
            adjacency[(j, j + 1)] = 1.0;
            adjacency[(j + 1, j)] = 1.0;
        }
        SurveillanceData {
            counts,
            unit_names: (0..r).map(|i| format!("u{i}")).collect(),
            freq: 26,
            covariates: BTreeMap::new(),
            offsets: BTreeMap::new(),
            adjacency,
        }
    }

    fn formula_ln() -> ModelFormula {
        ModelFormula {
            lambda: Some(ComponentSpec::intercept_only()),
            phi: None,
            nu: Some(ComponentSpec::intercept_only()),
            gamma: None,
            psi: PsiSpec::None,
            re_structure: CovStructure::None,
            normalize_weights: true,
        }
    }

    #[test]
    fn logistic_values() {
        let (g, g1, g2) = logistic_derivs(0.0);
        assert_eq!((g, g1, g2), (0.5, 0.25, 0.0));
        let (g, _, _) = logistic_derivs(0.2);
        assert_relative_eq!(g, 0.549834, epsilon = 1e-6);
        for x in [40.0, -40.0] {
            let (g, g1, g2) = logistic_derivs(x);
            assert!(g.is_finite() && g1.is_finite() && g2.is_finite());
            assert!(g1.abs() < 1e-15 && g2.abs() < 1e-15);
            assert!(if x > 0.0 { g > 1.0 - 1e-15 } else { g < 1e-15 });
        }
    }

    #[test]
    fn logistic_derivs_match_finite_differences() {
        let h = 1e-5;
        let mut x = -10.0;
        while x <= 10.0 {
            let (_, g1, g2) = logistic_derivs(x);
            let gp = logistic_derivs(x + h).0;
            let gm = logistic_derivs(x - h).0;
            assert!((g1 - (gp - gm) / (2.0 * h)).abs() < 1e-7);
            let dp = logistic_derivs(x + h).1;
            let dm = logistic_derivs(x - h).1;
            assert!((g2 - (dp - dm) / (2.0 * h)).abs() < 1e-7);
            x += 0.37;
        }
    }

    #[test]
    fn layout_round_trip() {
        let data = toy_data(8, 3);
        let weights = build_weights(&data.adjacency, true).unwrap();
        let formula = ModelFormula {
            lambda: Some(ComponentSpec {
                random_intercept: true,
                ..Default::default()
            }),
            phi: Some(ComponentSpec::intercept_only()),
            nu: Some(ComponentSpec {
                seasonality: vec![Harmonics {
                    period: 26.0,
                    harmonics: 1,
                }],
                random_intercept: true,
                ..Default::default()
            }),
            gamma: Some(ComponentSpec {
                ar_lag: true,
                ..Default::default()
            }),
            psi: PsiSpec::UnitSpecific,
            re_structure: CovStructure::Uncorrelated,
            normalize_weights: true,
        };
        let design = assemble_design(&formula, &data, &weights).unwrap();
        let lay = &design.layout;
        // 4 alphas + 2 seasonal betas + 1 ar beta, 2 RE blocks of 3, 3 psi
        assert_eq!(lay.n_theta, 7);
        assert_eq!(lay.n_b, 6);
        assert_eq!(lay.n_psi, 3);

        let mut state = ParameterState::zeros(lay);
        for (i, v) in state.theta.iter_mut().enumerate() {
            *v = i as f64 + 0.5;
        }
        for (i, v) in state.b.iter_mut().enumerate() {
            *v = -(i as f64);
        }
        for (i, v) in state.psi_tilde.iter_mut().enumerate() {
            *v = 0.1 * i as f64;
        }
        let packed = state.pack();
        let back = ParameterState::unpack(lay, &packed).unwrap();
        assert_eq!(state, back);

        let names = design.param_names();
        assert_eq!(names.len(), lay.total_len());
        assert_eq!(names[0], "alpha(lambda)");
        assert!(names.iter().any(|n| n == "beta(gamma):ar_lag"));
        assert!(names.iter().any(|n| n == "b(nu):3"));
        assert!(names.iter().any(|n| n == "psi_tilde:2"));
    }

    #[test]
    fn gamma_design_carries_lag() {
        let data = toy_data(6, 2);
        let weights = build_weights(&data.adjacency, true).unwrap();
        let mut formula = formula_ln();
        formula.gamma = Some(ComponentSpec {
            ar_lag: true,
            ..Default::default()
        });
        let design = assemble_design(&formula, &data, &weights).unwrap();
        let g = design.comps[Component::Gamma.index()].as_ref().unwrap();
        assert_eq!(g.n_cols, 2);
        assert_eq!(g.ar_col, Some(1));
        for t in 2..=6 {
            for r in 0..2 {
                let cell = design.cell_index(t, r);
                assert_eq!(g.x[cell * 2], 1.0);
                assert_eq!(g.x[cell * 2 + 1], data.counts[(t - 2, r)]);
            }
        }
    }

    #[test]
    fn nu_design_seasonal_and_offset() {
        let mut data = toy_data(6, 2);
        let mut pop = DMatrix::zeros(6, 2);
        pop.fill(2.5);
        data.offsets.insert("population".into(), pop);
        let weights = build_weights(&data.adjacency, true).unwrap();
        let formula = ModelFormula {
            lambda: None,
            phi: None,
            nu: Some(ComponentSpec {
                seasonality: vec![Harmonics {
                    period: 26.0,
                    harmonics: 1,
                }],
                offset: Some("population".into()),
                ..Default::default()
            }),
            gamma: None,
            psi: PsiSpec::None,
            re_structure: CovStructure::None,
            normalize_weights: true,
        };
        let design = assemble_design(&formula, &data, &weights).unwrap();
        let nu = design.comps[Component::Nu.index()].as_ref().unwrap();
        assert_eq!(nu.col_names, vec!["intercept", "sin(2pi*1t/26)", "cos(2pi*1t/26)"]);
        let omega = 2.0 * std::f64::consts::PI / 26.0;
        let cell = design.cell_index(3, 1);
        assert_relative_eq!(nu.x[cell * 3 + 1], (3.0 * omega).sin(), epsilon = 1e-15);
        assert_eq!(nu.offset[cell], 2.5);
    }

    #[test]
    fn covariate_column_matches_matrix() {
        let mut data = toy_data(6, 2);
        let mut v = DMatrix::zeros(6, 2);
        for i in 0..6 {
            for j in 0..2 {
                v[(i, j)] = (i as f64 + 1.0) / 10.0 + j as f64;
            }
        }
        data.covariates.insert("log1m_vacc".into(), v.clone());
        let mut formula = formula_ln();
        formula.lambda = Some(ComponentSpec {
            covariates: vec!["log1m_vacc".into()],
            ..Default::default()
        });
        let design = assemble_design(&formula, &data, &weights_of(&data)).unwrap();
        let lam = design.comps[Component::Lambda.index()].as_ref().unwrap();
        for t in 2..=6 {
            for r in 0..2 {
                let cell = design.cell_index(t, r);
                assert_eq!(lam.x[cell * 2 + 1], v[(t - 1, r)]);
            }
        }

        formula.lambda = Some(ComponentSpec {
            covariates: vec!["missing".into()],
            ..Default::default()
        });
        let err = assemble_design(&formula, &data, &weights_of(&data)).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    fn weights_of(data: &SurveillanceData) -> WeightMatrix {
        build_weights(&data.adjacency, true).unwrap()
    }

    #[test]
    fn mean_from_intercepts() {
        // mu = exp(-0.3) * y_prev + exp(0.5), with y_prev = 3
        let mut data = toy_data(3, 1);
        data.counts[(0, 0)] = 3.0;
        let formula = formula_ln();
        let design = assemble_design(&formula, &data, &weights_of(&data)).unwrap();
        let mut state = ParameterState::zeros(&design.layout);
        state.theta[design.layout.comp[0].as_ref().unwrap().alpha] = -0.3;
        state.theta[design.layout.comp[2].as_ref().unwrap().alpha] = 0.5;
        let surf = design.eval_predictors(&state).unwrap();
        let cell = design.cell_index(2, 0);
        assert_relative_eq!(
            surf.mu[cell],
            (-0.3f64).exp() * 3.0 + 0.5f64.exp(),
            epsilon = 1e-12
        );
        assert_relative_eq!(surf.mu[cell], 3.8712, epsilon = 1e-4);
    }

    #[test]
    fn gamma_from_intercept() {
        let data = toy_data(3, 1);
        let mut formula = formula_ln();
        formula.gamma = Some(ComponentSpec::intercept_only());
        let design = assemble_design(&formula, &data, &weights_of(&data)).unwrap();
        let mut state = ParameterState::zeros(&design.layout);
        state.theta[design.layout.comp[3].as_ref().unwrap().alpha] = 0.2;
        let surf = design.eval_predictors(&state).unwrap();
        assert_relative_eq!(
            surf.gamma.as_ref().unwrap()[0],
            0.549834,
            epsilon = 1e-6
        );
    }

    #[test]
    fn nu_only_identity() {
        let data = toy_data(4, 2);
        let formula = ModelFormula {
            lambda: None,
            phi: None,
            nu: Some(ComponentSpec::intercept_only()),
            gamma: None,
            psi: PsiSpec::None,
            re_structure: CovStructure::None,
            normalize_weights: true,
        };
        let design = assemble_design(&formula, &data, &weights_of(&data)).unwrap();
        let state = ParameterState::zeros(&design.layout);
        let surf = design.eval_predictors(&state).unwrap();
        for &m in &surf.mu {
            assert_eq!(m, 1.0);
        }
    }

    #[test]
    fn mu_linear_in_previous_counts() {
        let data = toy_data(5, 3);
        let formula = formula_ln();
        let design = assemble_design(&formula, &data, &weights_of(&data)).unwrap();
        let mut state = ParameterState::zeros(&design.layout);
        state.theta[0] = 0.4;
        state.theta[1] = -0.2;
        let y1: Vec<f64> = vec![1.0, 2.0, 3.0];
        let y2: Vec<f64> = y1.iter().map(|v| 2.0 * v).collect();
        let (_, _, nu1, _, mu1) = design.eval_at(&state, 3, &y1).unwrap();
        let (_, _, _, _, mu2) = design.eval_at(&state, 3, &y2).unwrap();
        let nu1 = nu1.unwrap();
        for r in 0..3 {
            // mu(2y) - nu = 2 (mu(y) - nu)
            assert_relative_eq!(mu2[r] - nu1[r], 2.0 * (mu1[r] - nu1[r]), epsilon = 1e-12);
        }
    }

    #[test]
    fn odds_ratio_of_ar_lag() {
        let data = toy_data(4, 1);
        let mut formula = formula_ln();
        formula.gamma = Some(ComponentSpec {
            ar_lag: true,
            ..Default::default()
        });
        let design = assemble_design(&formula, &data, &weights_of(&data)).unwrap();
        let mut state = ParameterState::zeros(&design.layout);
        let gl = design.layout.comp[3].as_ref().unwrap();
        state.theta[gl.alpha] = 0.2;
        let beta_gamma = -0.82;
        state.theta[gl.beta.start] = beta_gamma;

        let odds = |y_prev: f64| {
            let (_, _, _, g, _) = design.eval_at(&state, 2, &[y_prev]).unwrap();
            let g = g.unwrap()[0];
            g / (1.0 - g)
        };
        // one extra lagged case multiplies the odds by exp(beta)
        assert_relative_eq!(
            odds(4.0) / odds(3.0),
            beta_gamma.exp(),
            epsilon = 1e-12
        );
        assert_relative_eq!(1.0 - beta_gamma.exp(), 0.56, epsilon = 5e-3);
    }

    #[test]
    fn formula_validation_errors() {
        let mut f = formula_ln();
        f.lambda = None;
        f.nu = None;
        assert!(f.validate().is_err());

        let mut f = formula_ln();
        f.lambda = Some(ComponentSpec {
            ar_lag: true,
            ..Default::default()
        });
        assert!(f.validate().is_err());

        let mut f = formula_ln();
        f.re_structure = CovStructure::Correlated;
        f.lambda = Some(ComponentSpec {
            random_intercept: true,
            ..Default::default()
        });
        assert!(f.validate().is_err(), "correlated needs two RE components");

        let mut f = formula_ln();
        f.lambda = Some(ComponentSpec {
            random_intercept: true,
            ..Default::default()
        });
        assert!(f.validate().is_err(), "REs need a structure");
    }
}
