//! Signal content, shot ranking and photon-number calibration.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{fmt_sig9, ShotSet};
use crate::distance::Roi;
use crate::error::{invalid, Error, Result};
use crate::sim::{shot_rng, ArrivalSampler, Renderer};
use crate::trace::{DetectorKernel, Trace};

/// Earliest allowed ranking-window start; earlier times carry prompt artifacts.
pub const PROMPT_EXCLUSION_NS: f64 = 3.0;

/// Area under `ln(1 + v)` on raw rows restricted to `bins`.
#[inline]
pub(crate) fn content_of(values: &[f64], dt: f64) -> f64 {
    values.iter().map(|&v| v.max(0.0).ln_1p()).sum::<f64>() * dt
}

/// `sum_{i in window} ln(1 + max(v_i, 0)) * dt`.
pub fn signal_content(shot: &Trace, window: &Roi) -> Result<f64> {
    let bins = window.bins(shot.axis())?;
    Ok(content_of(&shot.values()[bins], shot.axis().dt_ns()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContentRanking {
    pub content: Vec<f64>,
    /// Shot indices by descending content, ties by ascending index.
    pub order: Vec<usize>,
    pub window: Roi,
}

impl ContentRanking {
    /// The `n` highest-content shots.
    pub fn top(&self, n: usize) -> &[usize] {
        &self.order[..n.min(self.order.len())]
    }
}

/// Rank all shots by signal content. The window must start at or after 3 ns.
pub fn rank_shots(set: &ShotSet, window: &Roi) -> Result<ContentRanking> {
    if window.t_start_ns < PROMPT_EXCLUSION_NS {
        return Err(invalid(format!(
            "ranking window starts at {} ns, before the {PROMPT_EXCLUSION_NS} ns prompt exclusion",
            window.t_start_ns
        )));
    }
    rank_shots_unchecked(set, window)
}

/// [`rank_shots`] without the prompt-exclusion check, for simulated data.
pub fn rank_shots_unchecked(set: &ShotSet, window: &Roi) -> Result<ContentRanking> {
    let bins = window.bins(set.axis())?;
    let dt = set.axis().dt_ns();
    let content: Vec<f64> = (0..set.n_shots())
        .into_par_iter()
        .map(|i| content_of(&set.row(i)[bins.clone()], dt))
        .collect();
    let mut order: Vec<usize> = (0..set.n_shots()).collect();
    order.sort_by(|&a, &b| content[b].total_cmp(&content[a]).then(a.cmp(&b)));
    Ok(ContentRanking {
        content,
        order,
        window: *window,
    })
}

/// Default ranking window `[3 ns, axis end)`.
pub fn default_ranking_window(set: &ShotSet) -> Result<Roi> {
    Roi::new(PROMPT_EXCLUSION_NS.max(set.axis().t0_ns()), set.axis().end_ns())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CalibrationEntry {
    pub n: u32,
    pub content_mean: f64,
    pub content_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhotonCalibration {
    /// Ascending in `n`.
    pub entries: Vec<CalibrationEntry>,
    pub tail_window: Roi,
    pub full_window: Roi,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Content-versus-photon-number table from traces simulated out of `avg`.
///
/// For each `N`, `n_sims` traces are built by drawing `N` arrival times from
/// `avg` (as a density) and stamping `kernel` at each. Among the traces whose
/// tail-window content lies within 1σ of the tail mean, the mean and
/// standard deviation of the full-window content form the entry.
pub fn calibrate_photon_number(
    avg: &Trace,
    kernel: &DetectorKernel,
    n_values: &[u32],
    n_sims: usize,
    tail: &Roi,
    full: &Roi,
    rng_seed: u64,
) -> Result<PhotonCalibration> {
    if n_sims < 100 {
        return Err(invalid(format!("n_sims must be at least 100, got {n_sims}")));
    }
    if n_values.is_empty() {
        return Err(invalid("no photon numbers to calibrate"));
    }
    let axis = *avg.axis();
    if avg.values().iter().any(|&v| v < 0.0) {
        return Err(invalid("average trace must be non-negative"));
    }
    let tail_bins = tail.bins(&axis)?;
    let full_bins = full.bins(&axis)?;
    if !avg.values()[tail_bins.clone()].iter().any(|&v| v > 0.0) {
        return Err(invalid("average trace has no mass in the tail window"));
    }
    let sampler = ArrivalSampler::from_weights(axis, avg.values())?;
    let renderer = Renderer::noiseless(axis, kernel.clone());
    let dt = axis.dt_ns();

    let mut ns = n_values.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let entries: Vec<CalibrationEntry> = ns
        .par_iter()
        .enumerate()
        .map(|(idx, &n)| {
            let mut rng = shot_rng(rng_seed, idx as u64);
            let mut tails = Vec::with_capacity(n_sims);
            let mut fulls = Vec::with_capacity(n_sims);
            for _ in 0..n_sims {
                let v = renderer.render(&sampler, n as u64, &mut rng);
                tails.push(content_of(&v[tail_bins.clone()], dt));
                fulls.push(content_of(&v[full_bins.clone()], dt));
            }
            let (tail_mean, tail_std) = mean_std(&tails);
            let selected: Vec<f64> = tails
                .iter()
                .zip(&fulls)
                .filter(|(t, _)| (**t - tail_mean).abs() <= tail_std)
                .map(|(_, f)| *f)
                .collect();
            let (content_mean, content_std) = mean_std(&selected);
            CalibrationEntry {
                n,
                content_mean,
                content_std,
            }
        })
        .collect();
    Ok(PhotonCalibration {
        entries,
        tail_window: *tail,
        full_window: *full,
    })
}

/// Invert the calibration by piecewise-linear interpolation of
/// `content_mean(N)`. Returns `(N_est, N_sigma)`.
pub fn estimate_photons(content_full: f64, cal: &PhotonCalibration) -> Result<(f64, f64)> {
    let e = &cal.entries;
    if e.len() < 2 {
        return Err(invalid("calibration needs at least two entries"));
    }
    let out_of_range = |nearest: &CalibrationEntry| Error::OutOfRange {
        value: content_full,
        nearest_n: nearest.n,
        nearest_content: nearest.content_mean,
    };
    if content_full < e[0].content_mean {
        return Err(out_of_range(&e[0]));
    }
    if content_full > e[e.len() - 1].content_mean {
        return Err(out_of_range(&e[e.len() - 1]));
    }
    for w in e.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        if content_full < lo.content_mean || content_full > hi.content_mean {
            continue;
        }
        if content_full == lo.content_mean {
            return Ok((lo.n as f64, lo.content_std / local_slope(lo, hi)));
        }
        let span = hi.content_mean - lo.content_mean;
        let f = (content_full - lo.content_mean) / span;
        let n_est = lo.n as f64 + f * (hi.n as f64 - lo.n as f64);
        let std = lo.content_std + f * (hi.content_std - lo.content_std);
        return Ok((n_est, std / local_slope(lo, hi)));
    }
    // non-monotone table and the value sits in a decreasing stretch
    let nearest = e
        .iter()
        .min_by(|a, b| {
            (a.content_mean - content_full)
                .abs()
                .total_cmp(&(b.content_mean - content_full).abs())
        })
        .expect("non-empty");
    Err(out_of_range(nearest))
}

fn local_slope(lo: &CalibrationEntry, hi: &CalibrationEntry) -> f64 {
    (hi.content_mean - lo.content_mean) / (hi.n as f64 - lo.n as f64)
}

pub fn calibration_csv(cal: &PhotonCalibration) -> String {
    let mut out = String::from("N,content_mean,content_std\n");
    for e in &cal.entries {
        let _ = writeln!(
            out,
            "{},{},{}",
            e.n,
            fmt_sig9(e.content_mean),
            fmt_sig9(e.content_std)
        );
    }
    out
}
