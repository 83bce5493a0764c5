//! Poisson log-likelihood distance between traces.
//!
//! Traces are rates (photon-equivalents per ns); the likelihood is evaluated
//! on per-bin counts `value * dt`. Data counts are clamped at zero and model
//! counts at `model_floor`.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dataset::ShotSet;
use crate::error::{invalid, Result};
use crate::trace::{TimeAxis, Trace};

/// Default model floor in counts per bin.
pub const DEFAULT_MODEL_FLOOR: f64 = 1e-3;

/// Half-open analysis window `[t_start_ns, t_end_ns)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub t_start_ns: f64,
    pub t_end_ns: f64,
}

const GRID_EPS: f64 = 1e-9;

impl Roi {
    pub fn new(t_start_ns: f64, t_end_ns: f64) -> Result<Self> {
        if !(t_start_ns.is_finite() && t_end_ns.is_finite()) {
            return Err(invalid("ROI bounds must be finite"));
        }
        if t_end_ns <= t_start_ns {
            return Err(invalid(format!(
                "ROI end {t_end_ns} must exceed start {t_start_ns}"
            )));
        }
        Ok(Self {
            t_start_ns,
            t_end_ns,
        })
    }

    /// The whole axis.
    pub fn full(axis: &TimeAxis) -> Self {
        Self {
            t_start_ns: axis.t0_ns(),
            t_end_ns: axis.end_ns(),
        }
    }

    pub fn width_ns(&self) -> f64 {
        self.t_end_ns - self.t_start_ns
    }

    pub fn contains(&self, t_ns: f64) -> bool {
        t_ns >= self.t_start_ns && t_ns < self.t_end_ns
    }

    /// Indices of the samples whose time lies in the window.
    pub fn bins(&self, axis: &TimeAxis) -> Result<Range<usize>> {
        let tol = GRID_EPS * axis.dt_ns().max(1.0);
        if self.t_start_ns < axis.t0_ns() - tol || self.t_end_ns > axis.end_ns() + tol {
            return Err(invalid(format!(
                "ROI [{}, {}) outside axis span [{}, {})",
                self.t_start_ns,
                self.t_end_ns,
                axis.t0_ns(),
                axis.end_ns()
            )));
        }
        let to_index = |t: f64| {
            let x = (t - axis.t0_ns()) / axis.dt_ns();
            ((x - GRID_EPS).ceil().max(0.0) as usize).min(axis.n_samples())
        };
        let lo = to_index(self.t_start_ns);
        let hi = to_index(self.t_end_ns);
        if hi <= lo {
            return Err(invalid(format!(
                "ROI [{}, {}) contains no samples",
                self.t_start_ns, self.t_end_ns
            )));
        }
        Ok(lo..hi)
    }
}

/// `ln Γ(a + 1)`, continuous in `a`.
#[inline]
pub fn ln_gamma_1p(a: f64) -> f64 {
    if a == 0.0 || a == 1.0 {
        0.0
    } else {
        ln_gamma(a + 1.0)
    }
}

/// A trace prepared for likelihood evaluation on a fixed bin range.
///
/// Holds both roles a trace can play: data (`counts`, `ln_gamma_counts`) and
/// model (`floored`, `ln_floored`).
#[derive(Clone, Debug)]
pub(crate) struct Prepared {
    pub counts: Vec<f64>,
    pub ln_gamma_counts: Vec<f64>,
    pub floored: Vec<f64>,
    pub ln_floored: Vec<f64>,
}

/// Borrowed window of a [`Prepared`] trace.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PreparedRef<'a> {
    pub counts: &'a [f64],
    pub ln_gamma_counts: &'a [f64],
    pub floored: &'a [f64],
    pub ln_floored: &'a [f64],
}

impl Prepared {
    pub fn new(values: &[f64], dt: f64, floor: f64) -> Self {
        let counts: Vec<f64> = values.iter().map(|v| (v * dt).max(0.0)).collect();
        let ln_gamma_counts = counts.iter().map(|&a| ln_gamma_1p(a)).collect();
        let floored: Vec<f64> = values.iter().map(|v| (v * dt).max(floor)).collect();
        let ln_floored = floored.iter().map(|b| b.ln()).collect();
        Self {
            counts,
            ln_gamma_counts,
            floored,
            ln_floored,
        }
    }

    /// Model role only; the data-role columns are left empty.
    pub fn model_only(values: &[f64], dt: f64, floor: f64) -> Self {
        let floored: Vec<f64> = values.iter().map(|v| (v * dt).max(floor)).collect();
        let ln_floored = floored.iter().map(|b| b.ln()).collect();
        Self {
            counts: Vec::new(),
            ln_gamma_counts: Vec::new(),
            floored,
            ln_floored,
        }
    }

    #[inline]
    pub fn view(&self) -> PreparedRef<'_> {
        self.slice(0..self.floored.len())
    }

    #[inline]
    pub fn slice(&self, r: Range<usize>) -> PreparedRef<'_> {
        PreparedRef {
            counts: &self.counts[r.clone()],
            ln_gamma_counts: &self.ln_gamma_counts[r.clone()],
            floored: &self.floored[r.clone()],
            ln_floored: &self.ln_floored[r],
        }
    }
}

/// Negative log-likelihood of `data` under `model`, both prepared on the same bins.
#[inline]
pub(crate) fn nll_prepared(data: PreparedRef<'_>, model: PreparedRef<'_>) -> f64 {
    let mut acc = 0.0;
    for k in 0..data.counts.len() {
        acc += -data.counts[k] * model.ln_floored[k] + model.floored[k] + data.ln_gamma_counts[k];
    }
    acc
}

#[inline]
pub(crate) fn sym_prepared(a: PreparedRef<'_>, b: PreparedRef<'_>) -> f64 {
    nll_prepared(a, b).max(nll_prepared(b, a))
}

/// Likelihood terms that depend on the model, `sum -a ln b + b`; the data-only
/// `ln Γ(a + 1)` part is the same for every model and is left out.
#[inline]
pub(crate) fn model_dependent_nll(counts: &[f64], model: &Prepared) -> f64 {
    let mut acc = 0.0;
    for k in 0..counts.len() {
        acc += -counts[k] * model.ln_floored[k] + model.floored[k];
    }
    acc
}

fn check_floor(model_floor: f64) -> Result<()> {
    if !(model_floor > 0.0 && model_floor.is_finite()) {
        return Err(invalid(format!(
            "model_floor must be positive, got {model_floor}"
        )));
    }
    Ok(())
}

/// `sum_i [ -a_i ln b_i + b_i + ln Γ(a_i + 1) ]` over the ROI, with
/// `a_i = max(data_i dt, 0)` and `b_i = max(model_i dt, model_floor)`.
pub fn poisson_nll(data: &Trace, model: &Trace, roi: &Roi, model_floor: f64) -> Result<f64> {
    check_floor(model_floor)?;
    if data.axis() != model.axis() {
        return Err(invalid("data and model traces do not share a time axis"));
    }
    let bins = roi.bins(data.axis())?;
    let dt = data.axis().dt_ns();
    let a = Prepared::new(&data.values()[bins.clone()], dt, model_floor);
    let b = Prepared::new(&model.values()[bins], dt, model_floor);
    Ok(nll_prepared(a.view(), b.view()))
}

/// `max(P(a, b), P(b, a))`.
pub fn sym_distance(a: &Trace, b: &Trace, roi: &Roi, model_floor: f64) -> Result<f64> {
    Ok(poisson_nll(a, b, roi, model_floor)?.max(poisson_nll(b, a, roi, model_floor)?))
}

/// Dense symmetric matrix of pairwise distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Unchecked constructor for internally produced symmetric matrices.
    pub(crate) fn from_raw(n: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n * n);
        Self { n, values }
    }

    /// Build from a full row-major matrix; symmetry and finiteness are checked.
    pub fn from_full(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(invalid(format!("expected {} entries, got {}", n * n, values.len())));
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() {
                    return Err(invalid(format!("entry ({i}, {j}) is not finite")));
                }
                if v != values[j * n + i] {
                    return Err(invalid(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, values })
    }

    /// Build from the strict upper triangle, row by row; the diagonal is zero.
    pub fn from_upper(n: usize, upper: &[f64]) -> Result<Self> {
        if upper.len() != n * n.saturating_sub(1) / 2 {
            return Err(invalid("upper triangle has the wrong length"));
        }
        let mut values = vec![0.0; n * n];
        let mut it = upper.iter();
        for i in 0..n {
            for j in i + 1..n {
                let v = *it.next().expect("length checked");
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self::from_full(n, values)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Apply `f` to every entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DistanceMatrix {
        DistanceMatrix {
            n: self.n,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Pairwise `sym_distance` among `members` of `set`, one evaluation per
/// unordered pair (diagonal included).
pub fn distance_matrix(
    set: &ShotSet,
    members: &[usize],
    roi: &Roi,
    model_floor: f64,
) -> Result<DistanceMatrix> {
    check_floor(model_floor)?;
    let mut seen = std::collections::HashSet::with_capacity(members.len());
    for &m in members {
        set.try_row(m)?;
        if !seen.insert(m) {
            return Err(invalid(format!("duplicate member index {m}")));
        }
    }
    let bins = roi.bins(set.axis())?;
    let dt = set.axis().dt_ns();
    let prepared: Vec<Prepared> = members
        .par_iter()
        .map(|&m| Prepared::new(&set.row(m)[bins.clone()], dt, model_floor))
        .collect();
    let n = members.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| sym_prepared(prepared[i].view(), prepared[j].view())).collect())
        .collect();
    let mut values = vec![0.0; n * n];
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + off;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(DistanceMatrix { n, values })
}
