//! Surveillance data containers, validation, transmission weights and
//! seasonal covariates.
//!
//! Conventions: counts are stored as a `T x R` matrix (rows = time periods,
//! columns = units); the time index `t` is 1-based throughout, matching the
//! usual presentation of these models.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Observed multivariate count time series plus everything needed to build a
/// model from it: unit metadata, named covariate and offset matrices, and the
/// binary adjacency of the units.
#[derive(Debug, Clone)]
pub struct SurveillanceData {
    /// Counts, `T x R`; entry `(t-1, r-1)` is the count of unit `r` in period `t`.
    pub counts: DMatrix<f64>,
    pub unit_names: Vec<String>,
    /// Periods per year (e.g. 26 for bi-weekly data).
    pub freq: u32,
    /// Named time-varying covariates, each `T x R`.
    pub covariates: BTreeMap<String, DMatrix<f64>>,
    /// Named strictly positive offsets, each `T x R`.
    pub offsets: BTreeMap<String, DMatrix<f64>>,
    /// Binary symmetric adjacency, `R x R`, zero diagonal.
    pub adjacency: DMatrix<f64>,
}

impl SurveillanceData {
    pub fn n_time(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_units(&self) -> usize {
        self.counts.ncols()
    }
}

/// Outcome of [`validate`]: empty `violations` means the data passed.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every `SurveillanceData` invariant and reports all violations at
/// once. Fitting refuses data that fails.
pub fn validate(data: &SurveillanceData) -> ValidationReport {
    let mut v = Vec::new();
    let (t, r) = (data.counts.nrows(), data.counts.ncols());

    if t < 2 {
        v.push(format!("need at least 2 time periods, got {t}"));
    }
    if r < 1 {
        v.push("need at least 1 unit".to_string());
    }
    if data.unit_names.len() != r {
        v.push(format!(
            "unit_names length {} does not match {} count columns",
            data.unit_names.len(),
            r
        ));
    }
    if data.freq < 2 {
        v.push(format!("freq must be at least 2, got {}", data.freq));
    }
    for (i, y) in data.counts.iter().enumerate() {
        if !y.is_finite() || *y < 0.0 || y.fract() != 0.0 {
            v.push(format!(
                "counts must be nonnegative integers: entry (t={}, r={}) is {}",
                i % t + 1,
                i / t + 1,
                y
            ));
            break;
        }
    }
    if data.adjacency.nrows() != r || data.adjacency.ncols() != r {
        v.push(format!(
            "adjacency must be {r}x{r}, got {}x{}",
            data.adjacency.nrows(),
            data.adjacency.ncols()
        ));
    } else {
        for i in 0..r {
            if data.adjacency[(i, i)] != 0.0 {
                v.push("adjacency diagonal must be zero".to_string());
                break;
            }
        }
        'sym: for i in 0..r {
            for j in 0..r {
                let a = data.adjacency[(i, j)];
                if a != data.adjacency[(j, i)] {
                    v.push("adjacency must be symmetric".to_string());
                    break 'sym;
                }
                if a != 0.0 && a != 1.0 {
                    v.push(format!("adjacency entries must be 0 or 1, got {a}"));
                    break 'sym;
                }
            }
        }
    }
    for (name, m) in &data.covariates {
        if m.nrows() != t || m.ncols() != r {
            v.push(format!(
                "covariate '{name}' must be {t}x{r}, got {}x{}",
                m.nrows(),
                m.ncols()
            ));
        } else if m.iter().any(|x| !x.is_finite()) {
            v.push(format!("covariate '{name}' contains non-finite values"));
        }
    }
    for (name, m) in &data.offsets {
        if m.nrows() != t || m.ncols() != r {
            v.push(format!(
                "offset '{name}' must be {t}x{r}, got {}x{}",
                m.nrows(),
                m.ncols()
            ));
        } else if m.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            v.push(format!("offset '{name}' must be strictly positive"));
        }
    }

    ValidationReport { violations: v }
}

/// Transmission weights `w[q, r]`: weight of transmission from unit `q` to
/// unit `r`. Zero diagonal; normalized rows of adjacent units sum to 1.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub w: DMatrix<f64>,
    /// Units without any neighbour (their weight row is all zero).
    pub isolated_units: Vec<usize>,
}

/// Builds first-order transmission weights from a validated adjacency matrix.
///
/// With `normalize`, `w[q, r] = 1/m_q` for adjacent pairs where `m_q` is the
/// number of neighbours of `q`; otherwise the adjacency entries are used
/// directly. Isolated units keep an all-zero row and are recorded (a warning
/// condition, not an error: models without a neighbourhood component never
/// look at the weights).
pub fn build_weights(adjacency: &DMatrix<f64>, normalize: bool) -> Result<WeightMatrix> {
    let r = adjacency.nrows();
    if adjacency.ncols() != r {
        return Err(Error::Dim(format!(
            "adjacency must be square, got {}x{}",
            r,
            adjacency.ncols()
        )));
    }
    let mut w = adjacency.clone();
    let mut isolated = Vec::new();
    for q in 0..r {
        let m_q: f64 = (0..r).map(|j| adjacency[(q, j)]).sum();
        if m_q == 0.0 {
            isolated.push(q);
        } else if normalize {
            for j in 0..r {
                w[(q, j)] /= m_q;
            }
        }
    }
    Ok(WeightMatrix {
        w,
        isolated_units: isolated,
    })
}

/// Seasonal covariate vector `(sin(w t), cos(w t), ..., sin(S w t), cos(S w t))`
/// with `w = 2 pi / period`. `t` is the 1-based time index.
pub fn seasonal_covariates(t: usize, harmonics: u32, period: f64) -> Vec<f64> {
    let omega = 2.0 * std::f64::consts::PI / period;
    let mut out = Vec::with_capacity(2 * harmonics as usize);
    for s in 1..=harmonics {
        let arg = f64::from(s) * omega * t as f64;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Amplitude and phase of `delta*sin(wt) + zeta*cos(wt) = A*sin(wt + phase)`.
///
/// The phase uses the two-argument arctangent `atan2(zeta, delta)` so the
/// quadrant is unambiguous. Returns `(A, None)` when both coefficients are
/// zero (degenerate wave, phase undefined).
pub fn amplitude_phase(delta: f64, zeta: f64) -> (f64, Option<f64>) {
    let amplitude = delta.hypot(zeta);
    if delta == 0.0 && zeta == 0.0 {
        (0.0, None)
    } else {
        (amplitude, Some(zeta.atan2(delta)))
    }
}
