//! End-to-end analysis: parameter scan over (N_hs, ROI), model building,
//! sorting of all shots, class curves, stability and consistency checks.

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{agglomerate, cluster_model, cut, linkage, silhouette_rows, Partition};
use crate::dataset::{fmt_sig9, ShotSet};
use crate::distance::{
    distance_matrix, model_dependent_nll, poisson_nll, DistanceMatrix, Prepared, PreparedRef, Roi,
    DEFAULT_MODEL_FLOOR,
};
use crate::error::{invalid, Error, Result};
use crate::signal::{default_ranking_window, rank_shots, ContentRanking};
use crate::sim::shot_rng;
use crate::trace::{poisson_band, TimeAxis, Trace, UncertaintyBand};

/// Parameters of one model-building and sorting run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    pub n_hs: usize,
    pub roi: Roi,
    pub k: usize,
    pub model_floor: f64,
}

impl AnalysisParams {
    pub fn new(n_hs: usize, roi: Roi, k: usize) -> Self {
        Self {
            n_hs,
            roi,
            k,
            model_floor: DEFAULT_MODEL_FLOOR,
        }
    }

    pub fn with_k(self, k: usize) -> Self {
        Self { k, ..self }
    }

    fn validate_for(&self, set: &ShotSet) -> Result<()> {
        if self.k < 1 || self.k > self.n_hs {
            return Err(invalid(format!(
                "k = {} must lie in [1, n_hs = {}]",
                self.k, self.n_hs
            )));
        }
        if self.n_hs > set.n_shots() {
            return Err(invalid(format!(
                "n_hs = {} exceeds the {} available shots",
                self.n_hs,
                set.n_shots()
            )));
        }
        if !(self.model_floor > 0.0) {
            return Err(invalid("model_floor must be positive"));
        }
        self.roi.bins(set.axis())?;
        Ok(())
    }
}

/// Uniform grid of ROI boundaries starting at `min_start_ns`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiGrid {
    pub step_ns: f64,
    pub min_start_ns: f64,
}

impl Default for RoiGrid {
    fn default() -> Self {
        Self {
            step_ns: 1.0,
            min_start_ns: 3.0,
        }
    }
}

impl RoiGrid {
    /// Boundary points `min_start + m * step` up to the axis end.
    pub fn points(&self, axis: &TimeAxis) -> Result<Vec<f64>> {
        if !(self.step_ns > 0.0) {
            return Err(invalid("ROI grid step must be positive"));
        }
        let start = self.min_start_ns.max(axis.t0_ns());
        let end = axis.end_ns();
        let m = ((end - start) / self.step_ns + 1e-9).floor() as usize;
        if m < 1 {
            return Err(invalid("ROI grid has no cells inside the axis"));
        }
        Ok((0..=m).map(|i| start + i as f64 * self.step_ns).collect())
    }
}

/// Clustering quality S over (ROI start, ROI end) for one `n_hs`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityMap {
    pub n_hs: usize,
    pub step_ns: f64,
    pub starts_ns: Vec<f64>,
    pub ends_ns: Vec<f64>,
    /// Row-major over `(start, end)`; `None` marks invalid cells.
    pub values: Vec<Option<f64>>,
}

impl QualityMap {
    #[inline]
    pub fn get(&self, i_start: usize, i_end: usize) -> Option<f64> {
        self.values[i_start * self.ends_ns.len() + i_end]
    }

    /// Valid cells as `(start_ns, end_ns, S)`.
    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let ne = self.ends_ns.len();
        self.values.iter().enumerate().filter_map(move |(idx, v)| {
            v.map(|s| (self.starts_ns[idx / ne], self.ends_ns[idx % ne], s))
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("start_ns,end_ns,S\n");
        for (s, e, q) in self.cells() {
            let _ = writeln!(out, "{},{},{}", fmt_sig9(s), fmt_sig9(e), fmt_sig9(q));
        }
        out
    }
}

/// 2-D Gaussian moving average over valid cells, weights renormalized per
/// cell. The kernel is truncated at 4σ.
pub fn smooth_quality_map(qm: &QualityMap, sigma_ns: f64) -> Result<QualityMap> {
    if !(sigma_ns >= 0.0) {
        return Err(invalid(format!("sigma_ns must be non-negative, got {sigma_ns}")));
    }
    if sigma_ns == 0.0 {
        return Ok(qm.clone());
    }
    let (ns, ne) = (qm.starts_ns.len(), qm.ends_ns.len());
    let reach = (4.0 * sigma_ns / qm.step_ns).floor() as isize;
    let inv = qm.step_ns * qm.step_ns / (2.0 * sigma_ns * sigma_ns);
    let values = (0..ns * ne)
        .into_par_iter()
        .map(|idx| {
            qm.values[idx]?;
            let (i, j) = ((idx / ne) as isize, (idx % ne) as isize);
            let (mut acc, mut wsum) = (0.0, 0.0);
            for di in -reach..=reach {
                for dj in -reach..=reach {
                    let (a, b) = (i + di, j + dj);
                    if a < 0 || b < 0 || a >= ns as isize || b >= ne as isize {
                        continue;
                    }
                    if let Some(v) = qm.values[a as usize * ne + b as usize] {
                        let w = (-((di * di + dj * dj) as f64) * inv).exp();
                        acc += w * v;
                        wsum += w;
                    }
                }
            }
            Some(acc / wsum)
        })
        .collect();
    Ok(QualityMap {
        values,
        ..qm.clone()
    })
}

fn bin_index(axis: &TimeAxis, t: f64) -> usize {
    let x = (t - axis.t0_ns()) / axis.dt_ns();
    ((x - 1e-9).ceil().max(0.0) as usize).min(axis.n_samples())
}

/// Raw quality map of the `n_hs` highest-content shots over all valid ROIs.
///
/// Pairwise likelihood terms are accumulated once into prefix sums along the
/// scanned span so every cell's distance matrix costs one subtraction per pair.
pub fn quality_map(
    set: &ShotSet,
    ranking: &ContentRanking,
    n_hs: usize,
    grid: &RoiGrid,
    k: usize,
    model_floor: f64,
    normalize: bool,
) -> Result<QualityMap> {
    if k < 2 || n_hs < k + 1 {
        return Err(invalid(format!("need 2 <= k < n_hs, got k = {k}, n_hs = {n_hs}")));
    }
    if n_hs > set.n_shots() {
        return Err(invalid(format!("n_hs = {n_hs} exceeds {} shots", set.n_shots())));
    }
    if !(model_floor > 0.0) {
        return Err(invalid("model_floor must be positive"));
    }
    let axis = set.axis();
    let dt = axis.dt_ns();
    let points = grid.points(axis)?;
    let starts_ns = points[..points.len() - 1].to_vec();
    let ends_ns = points[1..].to_vec();
    let bin_of: Vec<usize> = points.iter().map(|&t| bin_index(axis, t)).collect();
    let span = bin_of[0]..bin_of[bin_of.len() - 1];
    let len = span.len();

    let members = ranking.top(n_hs);
    let rows: Vec<&[f64]> = members.iter().map(|&m| &set.row(m)[span.clone()]).collect();
    let prepared: Vec<Prepared> = rows.iter().map(|r| Prepared::new(r, dt, model_floor)).collect();

    let n = n_hs;
    // prefix[(x * n + y) * (len + 1) + t]: P(x | y) over the first t bins of the span
    let stride = len + 1;
    let mut prefix = vec![0.0; n * n * stride];
    prefix
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(pair, out)| {
            let (x, y) = (pair / n, pair % n);
            if x == y {
                return;
            }
            let (a, b) = (&prepared[x], &prepared[y]);
            let mut acc = 0.0;
            for t in 0..len {
                acc += -a.counts[t] * b.ln_floored[t] + b.floored[t] + a.ln_gamma_counts[t];
                out[t + 1] = acc;
            }
        });

    let ne = ends_ns.len();
    let cells: Vec<(usize, usize)> = (0..starts_ns.len())
        .flat_map(|i| (i..ne).map(move |j| (i, j)))
        .collect();
    let scored: Vec<(usize, Option<f64>)> = cells
        .par_iter()
        .map(|&(i, j)| {
            let lo = bin_of[i] - span.start;
            let hi = bin_of[j + 1] - span.start;
            if hi <= lo {
                return (i * ne + j, None);
            }
            let mut d = vec![0.0; n * n];
            for x in 0..n {
                for y in x + 1..n {
                    let pxy = &prefix[(x * n + y) * stride..];
                    let pyx = &prefix[(y * n + x) * stride..];
                    let v = (pxy[hi] - pxy[lo]).max(pyx[hi] - pyx[lo]);
                    d[x * n + y] = v;
                    d[y * n + x] = v;
                }
            }
            let dm = DistanceMatrix::from_raw(n, d);
            let partition = cut(n, &linkage(&dm), k).expect("k within range");
            let roi_rows: Vec<&[f64]> = rows.iter().map(|r| &r[lo..hi]).collect();
            let views: Vec<PreparedRef<'_>> = prepared.iter().map(|p| p.slice(lo..hi)).collect();
            let s = silhouette_rows(&roi_rows, &views, &partition, dt, model_floor, normalize);
            (i * ne + j, Some(s.quality))
        })
        .collect();

    let mut values = vec![None; starts_ns.len() * ne];
    for (idx, v) in scored {
        values[idx] = v;
    }
    Ok(QualityMap {
        n_hs,
        step_ns: grid.step_ns,
        starts_ns,
        ends_ns,
        values,
    })
}

/// Default N_hs candidates.
pub const DEFAULT_N_HS: [usize; 7] = [10, 15, 20, 30, 50, 75, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub n_hs_candidates: Vec<usize>,
    pub grid: RoiGrid,
    pub k: usize,
    pub sigma_ns: f64,
    pub model_floor: f64,
    pub normalize_silhouette: bool,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            n_hs_candidates: DEFAULT_N_HS.to_vec(),
            grid: RoiGrid::default(),
            k: 2,
            sigma_ns: 1.0,
            model_floor: DEFAULT_MODEL_FLOOR,
            normalize_silhouette: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Optimization {
    pub params: AnalysisParams,
    /// Smoothed quality at the chosen parameters.
    pub quality: f64,
    pub raw_quality: Option<f64>,
    pub raw_maps: Vec<QualityMap>,
    pub smoothed_maps: Vec<QualityMap>,
}

/// Scan every `n_hs` candidate over the ROI grid and pick the maximum of the
/// smoothed quality. Ties prefer larger `n_hs`, then earlier start, then the
/// shorter ROI.
pub fn optimize_parameters(set: &ShotSet, cfg: &ScanConfig) -> Result<Optimization> {
    if cfg.n_hs_candidates.is_empty() {
        return Err(invalid("no n_hs candidates"));
    }
    for &n in &cfg.n_hs_candidates {
        if n < cfg.k + 1 {
            return Err(invalid(format!("n_hs candidate {n} must be at least k + 1 = {}", cfg.k + 1)));
        }
    }
    let ranking = rank_shots(set, &default_ranking_window(set)?)?;
    let mut raw_maps = Vec::new();
    let mut smoothed_maps = Vec::new();
    for &n_hs in &cfg.n_hs_candidates {
        let raw = quality_map(set, &ranking, n_hs, &cfg.grid, cfg.k, cfg.model_floor, cfg.normalize_silhouette)?;
        smoothed_maps.push(smooth_quality_map(&raw, cfg.sigma_ns)?);
        raw_maps.push(raw);
    }

    // (S, n_hs, start, width, map index, cell index)
    let mut best: Option<(f64, usize, f64, f64, usize, usize)> = None;
    for (mi, map) in smoothed_maps.iter().enumerate() {
        let ne = map.ends_ns.len();
        for (idx, v) in map.values.iter().enumerate() {
            let Some(s) = *v else { continue };
            let start = map.starts_ns[idx / ne];
            let width = map.ends_ns[idx % ne] - start;
            let better = match best {
                None => true,
                Some((bs, bn, bstart, bwidth, _, _)) => {
                    s > bs
                        || (s == bs
                            && (map.n_hs > bn
                                || (map.n_hs == bn
                                    && (start < bstart || (start == bstart && width < bwidth)))))
                }
            };
            if better {
                best = Some((s, map.n_hs, start, width, mi, idx));
            }
        }
    }
    let (quality, n_hs, start, width, mi, idx) =
        best.ok_or_else(|| invalid("quality maps contain no valid cell"))?;
    let params = AnalysisParams {
        n_hs,
        roi: Roi::new(start, start + width)?,
        k: cfg.k,
        model_floor: cfg.model_floor,
    };
    Ok(Optimization {
        params,
        quality,
        raw_quality: raw_maps[mi].values[idx],
        raw_maps,
        smoothed_maps,
    })
}

/// Class models built from the highest-content shots.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub models: Vec<Trace>,
    /// Shot indices used for model building, by descending content.
    pub members: Vec<usize>,
    pub partition: Partition,
}

/// Rank, keep the top `n_hs`, cluster them on the ROI into `k` groups and
/// average each group over the full axis.
pub fn build_models(set: &ShotSet, params: &AnalysisParams) -> Result<ModelSet> {
    params.validate_for(set)?;
    let ranking = rank_shots(set, &default_ranking_window(set)?)?;
    build_models_ranked(set, &ranking, params)
}

fn build_models_ranked(set: &ShotSet, ranking: &ContentRanking, params: &AnalysisParams) -> Result<ModelSet> {
    let members = ranking.top(params.n_hs).to_vec();
    let partition = if params.k == 1 {
        Partition::new(1, vec![0; members.len()])?
    } else {
        let dm = distance_matrix(set, &members, &params.roi, params.model_floor)?;
        agglomerate(&dm, params.k)?
    };
    let models = partition
        .clusters()
        .iter()
        .map(|c| {
            let shots: Vec<usize> = c.iter().map(|&p| members[p]).collect();
            cluster_model(set, &shots)
        })
        .collect::<Result<_>>()?;
    Ok(ModelSet {
        models,
        members,
        partition,
    })
}

/// Assign every shot to the model with the smallest Poisson NLL on the ROI
/// (ties to the lower model id).
pub fn sort_shots(set: &ShotSet, models: &[Trace], roi: &Roi, model_floor: f64) -> Result<Vec<usize>> {
    if models.is_empty() {
        return Err(invalid("no models to sort against"));
    }
    if models.iter().any(|m| m.axis() != set.axis()) {
        return Err(invalid("models do not share the shot set's time axis"));
    }
    if !(model_floor > 0.0) {
        return Err(invalid("model_floor must be positive"));
    }
    let bins = roi.bins(set.axis())?;
    let dt = set.axis().dt_ns();
    let prepared: Vec<Prepared> = models
        .iter()
        .map(|m| Prepared::model_only(&m.values()[bins.clone()], dt, model_floor))
        .collect();
    Ok((0..set.n_shots())
        .into_par_iter()
        .map_init(Vec::new, |counts, i| {
            counts.clear();
            counts.extend(set.row(i)[bins.clone()].iter().map(|v| (v * dt).max(0.0)));
            let mut best = (f64::INFINITY, 0);
            for (c, p) in prepared.iter().enumerate() {
                let v = model_dependent_nll(counts, p);
                if v < best.0 {
                    best = (v, c);
                }
            }
            best.1
        })
        .collect())
}

/// Poisson band of each class.
pub fn class_average(set: &ShotSet, assignment: &[usize], k: usize) -> Result<Vec<UncertaintyBand>> {
    if assignment.len() != set.n_shots() {
        return Err(invalid("assignment length differs from the number of shots"));
    }
    let mut members = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        if c >= k {
            return Err(invalid(format!("class id {c} out of range for k = {k}")));
        }
        members[c].push(i);
    }
    members
        .iter()
        .enumerate()
        .map(|(c, m)| {
            if m.is_empty() {
                Err(Error::DegenerateClass { class: c })
            } else {
                poisson_band(set, m)
            }
        })
        .collect()
}

/// Least-squares factor `α` with `y ≈ α x` on the window.
pub fn fit_scale(x: &Trace, y: &Trace, window: &Roi) -> Result<f64> {
    if x.axis() != y.axis() {
        return Err(invalid("fit_scale inputs do not share a time axis"));
    }
    let bins = window.bins(x.axis())?;
    let (xv, yv) = (&x.values()[bins.clone()], &y.values()[bins]);
    let sxx: f64 = xv.iter().map(|v| v * v).sum();
    if !(sxx > 0.0) {
        return Err(invalid("fit_scale: x has no weight in the window"));
    }
    let sxy: f64 = xv.iter().zip(yv).map(|(a, b)| a * b).sum();
    Ok(sxy / sxx)
}

/// `[start, end)` intersected with the axis span.
pub fn clip_window(axis: &TimeAxis, start_ns: f64, end_ns: f64) -> Result<Roi> {
    Roi::new(start_ns.max(axis.t0_ns()), end_ns.min(axis.end_ns()))
}

/// Window of the overall scale fit used to compare class curves.
pub const SCALE_WINDOW_NS: (f64, f64) = (0.0, 100.0);

#[derive(Clone, Debug)]
pub struct SortResult {
    pub models: ModelSet,
    pub assignment: Vec<usize>,
    pub class_curves: Vec<UncertaintyBand>,
    /// `scale_factors[j]` maps class `j` onto class 0 over the scale window.
    pub scale_factors: Vec<f64>,
}

impl SortResult {
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.models.models.len()];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Build models, sort every shot and average each class.
pub fn analyze(set: &ShotSet, params: &AnalysisParams) -> Result<SortResult> {
    let models = build_models(set, params)?;
    finish_analysis(set, params, models)
}

fn finish_analysis(set: &ShotSet, params: &AnalysisParams, models: ModelSet) -> Result<SortResult> {
    let assignment = sort_shots(set, &models.models, &params.roi, params.model_floor)?;
    let class_curves = class_average(set, &assignment, params.k)?;
    let window = clip_window(set.axis(), SCALE_WINDOW_NS.0, SCALE_WINDOW_NS.1)?;
    let scale_factors = class_curves
        .iter()
        .map(|c| fit_scale(&c.mean, &class_curves[0].mean, &window))
        .collect::<Result<_>>()?;
    Ok(SortResult {
        models,
        assignment,
        class_curves,
        scale_factors,
    })
}

/// All permutations of `0..k` in lexicographic order.
pub(crate) fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Best mapping of `models` onto `reference` (`result[j]` = reference class of
/// model `j`) by total Poisson NLL on the ROI.
pub fn match_classes(models: &[Trace], reference: &[Trace], roi: &Roi, model_floor: f64) -> Result<Vec<usize>> {
    let k = models.len();
    if reference.len() != k {
        return Err(invalid("model and reference counts differ"));
    }
    let mut cost = vec![0.0; k * k];
    for j in 0..k {
        for r in 0..k {
            cost[j * k + r] = poisson_nll(&models[j], &reference[r], roi, model_floor)?;
        }
    }
    let best = permutations(k)
        .into_iter()
        .map(|p| {
            let c: f64 = p.iter().enumerate().map(|(j, &r)| cost[j * k + r]).sum();
            (c, p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("k >= 1");
    Ok(best.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub n_subsets: usize,
    pub n_reps: usize,
    pub rng_seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            n_subsets: 5,
            n_reps: 10,
            rng_seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StabilityResult {
    pub reference: SortResult,
    /// Per reference class: mean of the matched reconstructions.
    pub mean: Vec<Trace>,
    /// Per reference class: per-bin standard deviation across reconstructions.
    pub std: Vec<Vec<f64>>,
    /// Per reference class: number of reconstructions that contributed.
    pub n_reconstructions: Vec<usize>,
    /// Matching `subset class -> reference class` of every run, in run order.
    pub matchings: Vec<Vec<usize>>,
}

/// Equal-sized random partitions of `0..n` (sizes differ by at most one).
fn random_partition(n: usize, parts: usize, seed: u64, rep: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut shot_rng(seed, rep as u64));
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut pos = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        let mut chunk = idx[pos..pos + size].to_vec();
        chunk.sort_unstable();
        out.push(chunk);
        pos += size;
    }
    out
}

/// Resampling analysis: the full pipeline is rerun on `n_subsets` random
/// disjoint subsets, `n_reps` times, and the spread of the matched class
/// curves gives a per-bin uncertainty.
pub fn stability_analysis(set: &ShotSet, params: &AnalysisParams, cfg: &StabilityConfig) -> Result<StabilityResult> {
    if cfg.n_subsets == 0 || cfg.n_reps == 0 {
        return Err(invalid("n_subsets and n_reps must be positive"));
    }
    let smallest = set.n_shots() / cfg.n_subsets;
    if smallest < params.n_hs {
        return Err(invalid(format!(
            "subsets of {smallest} shots are smaller than n_hs = {}",
            params.n_hs
        )));
    }
    let reference = analyze(set, params)?;
    let ref_models = &reference.models.models;

    let tasks: Vec<Vec<usize>> = (0..cfg.n_reps)
        .flat_map(|rep| random_partition(set.n_shots(), cfg.n_subsets, cfg.rng_seed, rep))
        .collect();
    // per run: matching and one optional curve per subset class
    let runs: Vec<(Vec<usize>, Vec<Option<Vec<f64>>>)> = tasks
        .par_iter()
        .map(|idx| {
            let sub = set.subset(idx)?;
            let models = build_models(&sub, params)?;
            let assignment = sort_shots(&sub, &models.models, &params.roi, params.model_floor)?;
            let mut sums = vec![vec![0.0; sub.n_samples()]; params.k];
            let mut counts = vec![0usize; params.k];
            for (i, &c) in assignment.iter().enumerate() {
                counts[c] += 1;
                for (s, v) in sums[c].iter_mut().zip(sub.row(i)) {
                    *s += v;
                }
            }
            let curves = sums
                .into_iter()
                .zip(&counts)
                .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
                .collect();
            let matching = match_classes(&models.models, ref_models, &params.roi, params.model_floor)?;
            Ok((matching, curves))
        })
        .collect::<Result<_>>()?;

    let axis = *set.axis();
    let n = axis.n_samples();
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); params.k];
    let mut matchings = Vec::with_capacity(runs.len());
    for (matching, curves) in runs {
        for (j, curve) in curves.into_iter().enumerate() {
            if let Some(c) = curve {
                per_class[matching[j]].push(c);
            }
        }
        matchings.push(matching);
    }
    let mut mean = Vec::with_capacity(params.k);
    let mut std = Vec::with_capacity(params.k);
    let mut n_reconstructions = Vec::with_capacity(params.k);
    for curves in &per_class {
        let m = curves.len();
        n_reconstructions.push(m);
        if m == 0 {
            mean.push(Trace::zeros(axis));
            std.push(vec![0.0; n]);
            continue;
        }
        let mu: Vec<f64> = (0..n)
            .map(|b| curves.iter().map(|c| c[b]).sum::<f64>() / m as f64)
            .collect();
        let sd: Vec<f64> = (0..n)
            .map(|b| (curves.iter().map(|c| (c[b] - mu[b]).powi(2)).sum::<f64>() / m as f64).sqrt())
            .collect();
        mean.push(Trace::new(axis, mu)?);
        std.push(sd);
    }
    Ok(StabilityResult {
        reference,
        mean,
        std,
        n_reconstructions,
        matchings,
    })
}

impl StabilityResult {
    /// Combined 1σ band of class `c`: Poisson and resampling spread in quadrature.
    pub fn combined_sigma(&self, c: usize) -> Vec<f64> {
        self.reference.class_curves[c]
            .sigma
            .iter()
            .zip(&self.std[c])
            .map(|(p, s)| (p * p + s * s).sqrt())
            .collect()
    }

    /// Fraction of bins in `window` where the full-run curve of class `c` lies
    /// within one resampling std of the mean reconstruction.
    pub fn reference_coverage(&self, c: usize, window: &Roi) -> Result<f64> {
        let bins = window.bins(self.mean[c].axis())?;
        let total = bins.len();
        let full = self.reference.class_curves[c].mean.values();
        let mean = self.mean[c].values();
        let within = bins
            .filter(|&i| (full[i] - mean[i]).abs() <= self.std[c][i])
            .count();
        Ok(within as f64 / total as f64)
    }
}

/// How two curves are compared.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    /// Bins compared, `[start, end)` in ns.
    pub window_ns: (f64, f64),
    /// Window of the overall scale fit.
    pub scale_window_ns: (f64, f64),
    /// Agreement threshold in units of the combined σ.
    pub z: f64,
    /// Minimum fraction of bins within `z σ` for the curves to agree.
    pub min_fraction: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            window_ns: (3.0, 100.0),
            scale_window_ns: SCALE_WINDOW_NS,
            z: 3.0,
            min_fraction: 0.95,
        }
    }
}

/// Fraction of bins in the comparison window where `a` and the scale-fitted
/// `b` differ by at most `z` combined σ.
pub fn fraction_within(a: &Trace, sigma_a: &[f64], b: &Trace, sigma_b: &[f64], cfg: &ComparisonConfig) -> Result<f64> {
    let axis = a.axis();
    let scale_window = clip_window(axis, cfg.scale_window_ns.0, cfg.scale_window_ns.1)?;
    let alpha = fit_scale(b, a, &scale_window)?;
    let bins: Range<usize> = clip_window(axis, cfg.window_ns.0, cfg.window_ns.1)?.bins(axis)?;
    let total = bins.len();
    let within = bins
        .filter(|&i| {
            let diff = (a.values()[i] - alpha * b.values()[i]).abs();
            let sigma = (sigma_a[i].powi(2) + (alpha * sigma_b[i]).powi(2)).sqrt();
            diff <= cfg.z * sigma
        })
        .count();
    Ok(within as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairAgreement {
    pub a: usize,
    pub b: usize,
    pub fraction_within: f64,
    pub agree: bool,
}

/// Pairwise agreement of all recovered classes within combined bands.
pub fn compare_classes(result: &StabilityResult, cfg: &ComparisonConfig) -> Result<Vec<PairAgreement>> {
    let k = result.reference.class_curves.len();
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let f = fraction_within(
                &result.reference.class_curves[a].mean,
                &result.combined_sigma(a),
                &result.reference.class_curves[b].mean,
                &result.combined_sigma(b),
                cfg,
            )?;
            out.push(PairAgreement {
                a,
                b,
                fraction_within: f,
                agree: f >= cfg.min_fraction,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyReport {
    /// Single-class set forced into two clusters.
    pub forced_split: Option<Vec<PairAgreement>>,
    /// Full set with the chosen `k`.
    pub base: Vec<PairAgreement>,
    /// Full set with `k + 1` clusters.
    pub extra: Vec<PairAgreement>,
}

impl ConsistencyReport {
    pub fn forced_split_agrees(&self) -> Option<bool> {
        self.forced_split.as_ref().map(|p| p.iter().all(|x| x.agree))
    }

    pub fn base_distinct(&self) -> bool {
        self.base.iter().all(|x| !x.agree)
    }

    pub fn extra_agreeing_pairs(&self) -> usize {
        self.extra.iter().filter(|x| x.agree).count()
    }
}

/// Consistency checks on the cluster count:
/// a single-class set forced into two clusters should give agreeing curves,
/// the full set with `k` clusters distinct curves, and with `k + 1` clusters
/// two of the recovered curves should coincide.
pub fn consistency_tests(
    full: &ShotSet,
    single_class: Option<&ShotSet>,
    params: &AnalysisParams,
    stability: &StabilityConfig,
    cmp: &ComparisonConfig,
) -> Result<ConsistencyReport> {
    let forced_split = single_class
        .map(|s| {
            let r = stability_analysis(s, &params.with_k(2), stability)?;
            compare_classes(&r, cmp)
        })
        .transpose()?;
    let base = compare_classes(&stability_analysis(full, params, stability)?, cmp)?;
    let extra = compare_classes(&stability_analysis(full, &params.with_k(params.k + 1), stability)?, cmp)?;
    Ok(ConsistencyReport {
        forced_split,
        base,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::silhouette;
    use crate::sim::{generate_experiment, SimConfig};
    use proptest::prelude::*;

    fn small_ab(n_shots: usize, t_end: f64) -> ShotSet {
        let mut cfg = SimConfig::desk_scale_ab();
        cfg.n_shots = n_shots;
        cfg.axis = TimeAxis::spanning(0.0, t_end, 0.5).unwrap();
        generate_experiment(&cfg).unwrap().set
    }

    fn map_from(values: Vec<Option<f64>>, ns: usize, ne: usize) -> QualityMap {
        QualityMap {
            n_hs: 10,
            step_ns: 1.0,
            starts_ns: (0..ns).map(|i| i as f64).collect(),
            ends_ns: (0..ne).map(|i| i as f64 + 1.0).collect(),
            values,
        }
    }

    fn smooth_oracle(qm: &QualityMap, sigma: f64) -> Vec<Option<f64>> {
        let ne = qm.ends_ns.len();
        (0..qm.values.len())
            .map(|c| {
                qm.values[c]?;
                let (ci, cj) = ((c / ne) as f64, (c % ne) as f64);
                let (mut a, mut w) = (0.0, 0.0);
                for (o, v) in qm.values.iter().enumerate() {
                    let Some(v) = v else { continue };
                    let d2 = ((o / ne) as f64 - ci).powi(2) + ((o % ne) as f64 - cj).powi(2);
                    let (di, dj) = (((o / ne) as f64 - ci).abs(), ((o % ne) as f64 - cj).abs());
                    if di > 4.0 * sigma || dj > 4.0 * sigma {
                        continue;
                    }
                    let wt = (-d2 / (2.0 * sigma * sigma)).exp();
                    a += wt * v;
                    w += wt;
                }
                Some(a / w)
            })
            .collect()
    }

    #[test]
    fn spike_spreads_by_gaussian_weights() {
        let n = 15;
        let mut values = vec![Some(0.0); n * n];
        values[7 * n + 7] = Some(1.0);
        let s = smooth_quality_map(&map_from(values, n, n), 1.0).unwrap();
        let centre = s.get(7, 7).unwrap();
        let side = s.get(7, 8).unwrap();
        let diag = s.get(8, 8).unwrap();
        assert!((side / centre - (-0.5f64).exp()).abs() < 1e-12);
        assert!((diag / centre - (-1.0f64).exp()).abs() < 1e-12);
        assert!(centre < 0.5 && centre > 0.1);
    }

    #[test]
    fn smoothing_keeps_invalid_cells_and_constants() {
        let n = 6;
        let values: Vec<Option<f64>> = (0..n * n)
            .map(|c| if c % n >= c / n { Some(0.25) } else { None })
            .collect();
        let s = smooth_quality_map(&map_from(values.clone(), n, n), 1.5).unwrap();
        for (a, b) in s.values.iter().zip(&values) {
            assert_eq!(a.is_some(), b.is_some());
            if let Some(v) = a {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
        assert_eq!(smooth_quality_map(&map_from(values.clone(), n, n), 0.0).unwrap().values, values);
        assert!(smooth_quality_map(&map_from(values, n, n), -1.0).is_err());
    }

    proptest! {
        #[test]
        fn smoothing_matches_direct_sum(
            raw in proptest::collection::vec(proptest::option::weighted(0.8, -1.0f64..1.0), 8 * 7),
            sigma in 0.3f64..2.5,
        ) {
            let qm = map_from(raw, 8, 7);
            let fast = smooth_quality_map(&qm, sigma).unwrap();
            for (a, b) in fast.values.iter().zip(smooth_oracle(&qm, sigma)) {
                match (a, b) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                    (None, None) => {}
                    _ => prop_assert!(false, "validity differs"),
                }
            }
        }
    }

    #[test]
    fn grid_points_start_at_exclusion_edge() {
        let axis = TimeAxis::spanning(0.0, 10.0, 0.5).unwrap();
        let p = RoiGrid { step_ns: 2.0, min_start_ns: 3.0 }.points(&axis).unwrap();
        assert_eq!(p, vec![3.0, 5.0, 7.0, 9.0]);
        assert!(RoiGrid { step_ns: 0.0, min_start_ns: 3.0 }.points(&axis).is_err());
        assert!(RoiGrid { step_ns: 8.0, min_start_ns: 3.0 }.points(&axis).is_err());
    }

    #[test]
    fn quality_map_cells_match_direct_silhouette() {
        let set = small_ab(300, 20.0);
        let ranking = rank_shots(&set, &default_ranking_window(&set).unwrap()).unwrap();
        let grid = RoiGrid { step_ns: 2.0, min_start_ns: 3.0 };
        let qm = quality_map(&set, &ranking, 12, &grid, 2, 1e-3, false).unwrap();
        let members = ranking.top(12);
        let ne = qm.ends_ns.len();
        let mut checked = 0;
        for i in 0..qm.starts_ns.len() {
            for j in 0..ne {
                let v = qm.get(i, j);
                if j < i {
                    assert!(v.is_none());
                    continue;
                }
                let roi = Roi::new(qm.starts_ns[i], qm.ends_ns[j]).unwrap();
                let dm = distance_matrix(&set, members, &roi, 1e-3).unwrap();
                let p = agglomerate(&dm, 2).unwrap();
                let s = silhouette(&set, members, &p, &roi, 1e-3, false).unwrap();
                assert!((v.unwrap() - s.quality).abs() < 1e-9 * (1.0 + s.quality.abs()));
                checked += 1;
            }
        }
        assert_eq!(checked, qm.cells().count());
        assert!(qm.to_csv().starts_with("start_ns,end_ns,S\n"));
    }

    #[test]
    fn optimizer_rejects_bad_candidates() {
        let set = small_ab(50, 20.0);
        let cfg = ScanConfig { n_hs_candidates: vec![2], ..ScanConfig::default() };
        assert!(optimize_parameters(&set, &cfg).is_err());
        let cfg = ScanConfig { n_hs_candidates: vec![60], ..ScanConfig::default() };
        assert!(optimize_parameters(&set, &cfg).is_err());
    }

    #[test]
    fn optimizer_returns_the_smoothed_argmax() {
        let set = small_ab(400, 30.0);
        let cfg = ScanConfig {
            n_hs_candidates: vec![10, 20],
            grid: RoiGrid { step_ns: 2.0, min_start_ns: 3.0 },
            ..ScanConfig::default()
        };
        let opt = optimize_parameters(&set, &cfg).unwrap();
        let best = opt
            .smoothed_maps
            .iter()
            .flat_map(|m| m.cells().map(|c| c.2))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(opt.quality, best);
        assert!(opt.params.roi.t_start_ns >= 3.0);
        assert!(opt.raw_quality.is_some());
    }

    #[test]
    fn fit_scale_recovers_factor() {
        let axis = TimeAxis::spanning(0.0, 5.0, 0.5).unwrap();
        let x = Trace::new(axis, (0..10).map(|i| (i as f64).sin() + 2.0).collect()).unwrap();
        let y = x.scaled(2.5);
        let a = fit_scale(&x, &y, &Roi::full(&axis)).unwrap();
        assert!((a - 2.5).abs() < 1e-12);
        assert!(fit_scale(&Trace::zeros(axis), &y, &Roi::full(&axis)).is_err());
    }

    #[test]
    fn sorting_picks_nll_argmin() {
        let set = small_ab(200, 30.0);
        let params = AnalysisParams::new(40, Roi::new(3.0, 12.0).unwrap(), 2);
        let models = build_models(&set, &params).unwrap();
        let got = sort_shots(&set, &models.models, &params.roi, 1e-3).unwrap();
        for i in 0..set.n_shots() {
            let shot = set.shot(i);
            let d: Vec<f64> = models
                .models
                .iter()
                .map(|m| poisson_nll(&shot, m, &params.roi, 1e-3).unwrap())
                .collect();
            let best = if d[1] < d[0] { 1 } else { 0 };
            // both sides share the data-only term, so argmin agrees up to rounding
            if (d[0] - d[1]).abs() > 1e-9 * d[0].abs() {
                assert_eq!(got[i], best, "shot {i}");
            }
        }
    }

    #[test]
    fn build_models_single_cluster_is_the_mean() {
        let set = small_ab(60, 20.0);
        let params = AnalysisParams::new(10, Roi::new(3.0, 12.0).unwrap(), 1);
        let ms = build_models(&set, &params).unwrap();
        assert_eq!(ms.models.len(), 1);
        let expect = cluster_model(&set, &ms.members).unwrap();
        assert_eq!(ms.models[0], expect);
        assert!(build_models(&set, &params.with_k(11)).is_err());
        assert!(build_models(&set, &AnalysisParams::new(61, params.roi, 2)).is_err());
    }

    #[test]
    fn empty_class_is_reported() {
        let set = small_ab(10, 10.0);
        let err = class_average(&set, &[0; 10], 2).unwrap_err();
        assert!(matches!(err, Error::DegenerateClass { class: 1 }));
        assert!(class_average(&set, &[0; 9], 1).is_err());
        assert!(class_average(&set, &[3; 10], 2).is_err());
    }

    #[test]
    fn random_partition_is_balanced_and_disjoint() {
        let parts = random_partition(103, 5, 9, 2);
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![21, 21, 21, 20, 20]);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(parts, random_partition(103, 5, 9, 2));
        assert_ne!(parts, random_partition(103, 5, 9, 3));
    }

    #[test]
    fn permutations_are_complete() {
        assert_eq!(permutations(1), vec![vec![0]]);
        let p = permutations(4);
        assert_eq!(p.len(), 24);
        assert_eq!(p[0], vec![0, 1, 2, 3]);
        assert_eq!(p[23], vec![3, 2, 1, 0]);
    }

    #[test]
    fn matching_undoes_a_relabeling() {
        let set = small_ab(200, 30.0);
        let params = AnalysisParams::new(40, Roi::new(3.0, 12.0).unwrap(), 2);
        let ms = build_models(&set, &params).unwrap();
        let swapped = vec![ms.models[1].clone(), ms.models[0].clone()];
        assert_eq!(match_classes(&swapped, &ms.models, &params.roi, 1e-3).unwrap(), vec![1, 0]);
        assert_eq!(match_classes(&ms.models, &ms.models, &params.roi, 1e-3).unwrap(), vec![0, 1]);
    }

    #[test]
    fn one_run_has_zero_spread() {
        let set = small_ab(300, 20.0);
        let params = AnalysisParams::new(20, Roi::new(3.0, 10.0).unwrap(), 2);
        let cfg = StabilityConfig { n_subsets: 1, n_reps: 1, rng_seed: 4 };
        let r = stability_analysis(&set, &params, &cfg).unwrap();
        assert_eq!(r.n_reconstructions, vec![1, 1]);
        assert!(r.std.iter().flatten().all(|&s| s == 0.0));
        let sizes = r.reference.class_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 300);
        assert!((r.reference.scale_factors[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stability_counts_every_run() {
        let set = small_ab(400, 20.0);
        let params = AnalysisParams::new(20, Roi::new(3.0, 10.0).unwrap(), 2);
        let cfg = StabilityConfig { n_subsets: 4, n_reps: 2, rng_seed: 4 };
        let r = stability_analysis(&set, &params, &cfg).unwrap();
        assert_eq!(r.matchings.len(), 8);
        assert!(r.n_reconstructions.iter().all(|&m| m <= 8));
        assert!(r.std.iter().flatten().any(|&s| s > 0.0));
        let too_many = StabilityConfig { n_subsets: 30, ..cfg };
        assert!(stability_analysis(&set, &params, &too_many).is_err());
    }

    #[test]
    fn identical_curves_agree_and_shifted_ones_do_not() {
        let axis = TimeAxis::spanning(0.0, 120.0, 0.5).unwrap();
        let base: Vec<f64> = axis.times().map(|t| 1.0 + (t / 9.0).sin() * 0.5).collect();
        let a = Trace::new(axis, base.clone()).unwrap();
        let sigma = vec![0.01; axis.n_samples()];
        let cfg = ComparisonConfig::default();
        let same = fraction_within(&a, &sigma, &a.scaled(3.0), &sigma, &cfg).unwrap();
        assert_eq!(same, 1.0);
        let shifted: Vec<f64> = axis.times().map(|t| 1.0 + ((t + 4.5) / 9.0).sin() * 0.5).collect();
        let b = Trace::new(axis, shifted).unwrap();
        assert!(fraction_within(&a, &sigma, &b, &sigma, &cfg).unwrap() < 0.5);
    }
}
