//! Complete-linkage agglomerative clustering and model-based silhouettes.

use serde::Serialize;

use crate::dataset::ShotSet;
use crate::distance::{distance_matrix, sym_prepared, DistanceMatrix, Prepared, PreparedRef, Roi};
use crate::error::{invalid, Result};
use crate::trace::Trace;

/// One agglomeration step: cluster `absorbed` is merged into `kept`.
///
/// Cluster ids are the smallest member index, so `kept < absorbed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Merge {
    pub kept: usize,
    pub absorbed: usize,
    pub distance: f64,
}

/// Assignment of `n` members to `k` non-empty clusters.
///
/// Cluster ids are numbered by the smallest member index they contain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl Partition {
    pub fn new(k: usize, assignment: Vec<usize>) -> Result<Self> {
        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            if c >= k {
                return Err(invalid(format!("cluster id {c} out of range for k = {k}")));
            }
            sizes[c] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(invalid(format!("cluster {empty} is empty")));
        }
        Ok(Self { k, assignment })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Member positions of each cluster, ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters().iter().map(Vec::len).collect()
    }
}

/// Full complete-linkage merge sequence (`n - 1` merges).
///
/// At every step the pair of active clusters with the smallest linkage
/// distance is merged; ties go to the lexicographically smallest
/// `(kept, absorbed)` id pair.
pub fn linkage(dm: &DistanceMatrix) -> Vec<Merge> {
    let n = dm.n();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    if n < 2 {
        return merges;
    }
    let mut d = dm.as_slice().to_vec();
    let mut active = vec![true; n];
    // nearest[i]: (distance, j) minimizing d[i][j] over active j > i, ties to smaller j
    let mut nearest: Vec<Option<(f64, usize)>> = vec![None; n];

    let scan_row = |d: &[f64], active: &[bool], i: usize| -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for j in i + 1..n {
            if active[j] {
                let v = d[i * n + j];
                if best.is_none_or(|(bv, _)| v < bv) {
                    best = Some((v, j));
                }
            }
        }
        best
    };

    for i in 0..n {
        nearest[i] = scan_row(&d, &active, i);
    }

    for _ in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            if let Some((v, j)) = nearest[i] {
                if best.is_none_or(|(bv, _, _)| v < bv) {
                    best = Some((v, i, j));
                }
            }
        }
        let (dist, a, b) = best.expect("at least two active clusters remain");
        merges.push(Merge {
            kept: a,
            absorbed: b,
            distance: dist,
        });
        active[b] = false;
        for r in 0..n {
            if active[r] && r != a {
                let v = d[r * n + a].max(d[r * n + b]);
                d[r * n + a] = v;
                d[a * n + r] = v;
            }
        }
        for r in 0..n {
            if !active[r] {
                continue;
            }
            let stale = r == a || matches!(nearest[r], Some((_, j)) if j == a || j == b);
            if stale {
                nearest[r] = scan_row(&d, &active, r);
            }
        }
    }
    merges
}

/// Partition obtained by applying the first `n - k` merges.
pub fn cut(n: usize, merges: &[Merge], k: usize) -> Result<Partition> {
    if k < 1 || k > n {
        return Err(invalid(format!("k = {k} outside [1, {n}]")));
    }
    if merges.len() < n - k {
        return Err(invalid("merge sequence too short for requested k"));
    }
    let mut root: Vec<usize> = (0..n).collect();
    for m in &merges[..n - k] {
        root[m.absorbed] = m.kept;
    }
    let find = |mut i: usize| {
        while root[i] != i {
            i = root[i];
        }
        i
    };
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut assignment = Vec::with_capacity(n);
    for i in 0..n {
        let r = find(i);
        if label[r] == usize::MAX {
            label[r] = next;
            next += 1;
        }
        assignment.push(label[r]);
    }
    Partition::new(k, assignment)
}

/// Complete-linkage agglomeration down to `k_target` clusters.
pub fn agglomerate(dm: &DistanceMatrix, k_target: usize) -> Result<Partition> {
    let n = dm.n();
    if k_target < 1 || k_target > n {
        return Err(invalid(format!("k_target = {k_target} outside [1, {n}]")));
    }
    cut(n, &linkage(dm), k_target)
}

/// Per-bin mean over `members` on the full axis.
pub fn cluster_model(set: &ShotSet, members: &[usize]) -> Result<Trace> {
    if members.is_empty() {
        return Err(invalid("cluster_model needs at least one member"));
    }
    let mut sum = vec![0.0; set.n_samples()];
    for &m in members {
        for (s, v) in sum.iter_mut().zip(set.try_row(m)?) {
            *s += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    Trace::new(*set.axis(), sum)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SilhouetteReport {
    pub per_member: Vec<f64>,
    pub per_cluster_mean: Vec<f64>,
    /// Minimum of the per-cluster means.
    pub quality: f64,
}

/// `(d_other - d_own) / max(d_own, d_other)`; zero when both vanish.
#[inline]
pub fn silhouette_value(d_own: f64, d_other: f64) -> f64 {
    let m = d_own.max(d_other);
    if m > 0.0 {
        (d_other - d_own) / m
    } else {
        0.0
    }
}

fn mean_of(rows: &[&[f64]], idx: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut sum = vec![0.0; rows[0].len()];
    let mut count = 0usize;
    for i in idx {
        for (s, v) in sum.iter_mut().zip(rows[i]) {
            *s += v;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    sum
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Silhouette on ROI-restricted rows (rates) with their prepared forms,
/// shared by the public entry point and the parameter scan.
pub(crate) fn silhouette_rows(
    rows: &[&[f64]],
    shots: &[PreparedRef<'_>],
    partition: &Partition,
    dt: f64,
    floor: f64,
    normalize: bool,
) -> SilhouetteReport {
    let clusters = partition.clusters();
    let k = partition.k;
    let models: Vec<Prepared> = clusters
        .iter()
        .map(|c| Prepared::new(&mean_of(rows, c.iter().copied()), dt, floor))
        .collect();

    // std of member-to-own-model distances; None when the term is not normalized
    let scale: Vec<Option<f64>> = if normalize {
        clusters
            .iter()
            .zip(&models)
            .map(|(c, model)| {
                if c.len() < 2 {
                    return None;
                }
                let ds: Vec<f64> = c.iter().map(|&i| sym_prepared(shots[i], model.view())).collect();
                let s = population_std(&ds);
                (s > 0.0).then_some(s)
            })
            .collect()
    } else {
        vec![None; k]
    };
    let norm = |d: f64, c: usize| scale[c].map_or(d, |s| d / s);

    let per_member: Vec<f64> = (0..rows.len())
        .map(|i| {
            let own = partition.assignment[i];
            let members = &clusters[own];
            if members.len() < 2 {
                return 0.0;
            }
            let loo = mean_of(rows, members.iter().copied().filter(|&m| m != i));
            let loo = Prepared::new(&loo, dt, floor);
            let d_own = norm(sym_prepared(shots[i], loo.view()), own);
            let d_other = (0..k)
                .filter(|&c| c != own)
                .map(|c| norm(sym_prepared(shots[i], models[c].view()), c))
                .fold(f64::INFINITY, f64::min);
            silhouette_value(d_own, d_other)
        })
        .collect();

    let per_cluster_mean: Vec<f64> = clusters
        .iter()
        .map(|c| c.iter().map(|&i| per_member[i]).sum::<f64>() / c.len() as f64)
        .collect();
    let quality = per_cluster_mean.iter().copied().fold(f64::INFINITY, f64::min);
    SilhouetteReport {
        per_member,
        per_cluster_mean,
        quality,
    }
}

/// Model-based silhouette of `partition` over the shots `members` of `set`.
///
/// A member's own-cluster distance is taken to the leave-one-out mean of its
/// cluster; singleton members score 0.
pub fn silhouette(
    set: &ShotSet,
    members: &[usize],
    partition: &Partition,
    roi: &Roi,
    model_floor: f64,
    normalize: bool,
) -> Result<SilhouetteReport> {
    if partition.k < 2 {
        return Err(invalid("silhouette needs at least two clusters"));
    }
    if partition.n() != members.len() {
        return Err(invalid(format!(
            "partition covers {} members but {} were given",
            partition.n(),
            members.len()
        )));
    }
    if !(model_floor > 0.0) {
        return Err(invalid("model_floor must be positive"));
    }
    let bins = roi.bins(set.axis())?;
    let rows: Vec<&[f64]> = members
        .iter()
        .map(|&m| set.try_row(m).map(|r| &r[bins.clone()]))
        .collect::<Result<_>>()?;
    let dt = set.axis().dt_ns();
    let prepared: Vec<Prepared> = rows.iter().map(|r| Prepared::new(r, dt, model_floor)).collect();
    let views: Vec<PreparedRef<'_>> = prepared.iter().map(Prepared::view).collect();
    Ok(silhouette_rows(
        &rows,
        &views,
        partition,
        set.axis().dt_ns(),
        model_floor,
        normalize,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterSelection {
    pub k_best: usize,
    /// `(k, S)` for `k = 2..=k_max`.
    pub quality: Vec<(usize, f64)>,
    pub partition: Partition,
}

/// Pick the cluster count in `2..=k_max` with the highest quality S
/// (ties to the smaller k).
pub fn select_num_clusters(
    set: &ShotSet,
    members: &[usize],
    roi: &Roi,
    k_max: usize,
    model_floor: f64,
) -> Result<ClusterSelection> {
    if k_max < 2 || k_max + 1 > members.len() {
        return Err(invalid(format!(
            "k_max = {k_max} must lie in [2, {}]",
            members.len().saturating_sub(1)
        )));
    }
    let dm = distance_matrix(set, members, roi, model_floor)?;
    let merges = linkage(&dm);
    let mut quality = Vec::with_capacity(k_max - 1);
    let mut best: Option<(usize, f64, Partition)> = None;
    for k in 2..=k_max {
        let p = cut(members.len(), &merges, k)?;
        let s = silhouette(set, members, &p, roi, model_floor, false)?.quality;
        quality.push((k, s));
        if best.as_ref().is_none_or(|(_, bs, _)| s > *bs) {
            best = Some((k, s, p));
        }
    }
    let (k_best, _, partition) = best.expect("k range is non-empty");
    Ok(ClusterSelection {
        k_best,
        quality,
        partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TimeAxis;

    /// Naive complete linkage recomputing every cluster distance from members.
    /// The cluster list stays sorted by smallest member, so list order is id order.
    fn reference_linkage(dm: &DistanceMatrix) -> Vec<Merge> {
        let n = dm.n();
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let mut out = Vec::new();
        while clusters.len() > 1 {
            let mut best: Option<(f64, usize, usize)> = None;
            for x in 0..clusters.len() {
                for y in x + 1..clusters.len() {
                    let mut link = f64::NEG_INFINITY;
                    for &i in &clusters[x] {
                        for &j in &clusters[y] {
                            link = link.max(dm.get(i, j));
                        }
                    }
                    if best.is_none_or(|(bl, _, _)| link < bl) {
                        best = Some((link, x, y));
                    }
                }
            }
            let (link, x, y) = best.unwrap();
            let kept = clusters[x][0];
            let absorbed = clusters[y][0];
            let moved = clusters.remove(y);
            clusters[x].extend(moved);
            clusters[x].sort_unstable();
            out.push(Merge { kept, absorbed, distance: link });
        }
        out
    }

    fn two_triples() -> DistanceMatrix {
        let mut v = vec![0.0; 36];
        let group = |i: usize| i / 3;
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    v[i * 6 + j] = if group(i) == group(j) {
                        0.5 + 0.1 * ((i + j) % 3) as f64
                    } else {
                        10.0 + (i * j % 4) as f64
                    };
                }
            }
        }
        DistanceMatrix::from_full(6, v).unwrap()
    }

    #[test]
    fn identity_and_single_cluster() {
        let dm = two_triples();
        let p = agglomerate(&dm, 6).unwrap();
        assert_eq!(p.assignment, vec![0, 1, 2, 3, 4, 5]);
        let p = agglomerate(&dm, 1).unwrap();
        assert_eq!(p.assignment, vec![0; 6]);
        assert!(agglomerate(&dm, 0).is_err());
        assert!(agglomerate(&dm, 7).is_err());
    }

    /// Every merge order that always joins some minimal pair (any tie order).
    fn all_greedy_outcomes(dm: &DistanceMatrix, k: usize) -> Vec<Vec<usize>> {
        fn rec(dm: &DistanceMatrix, clusters: Vec<Vec<usize>>, k: usize, out: &mut Vec<Vec<usize>>) {
            if clusters.len() == k {
                let mut a = vec![0; dm.n()];
                let mut sorted = clusters.clone();
                sorted.sort_by_key(|c| *c.iter().min().unwrap());
                for (ci, c) in sorted.iter().enumerate() {
                    for &m in c {
                        a[m] = ci;
                    }
                }
                if !out.contains(&a) {
                    out.push(a);
                }
                return;
            }
            let link = |x: &Vec<usize>, y: &Vec<usize>| {
                x.iter().flat_map(|&i| y.iter().map(move |&j| (i, j))).map(|(i, j)| dm.get(i, j)).fold(f64::MIN, f64::max)
            };
            let mut min = f64::INFINITY;
            for x in 0..clusters.len() {
                for y in x + 1..clusters.len() {
                    min = min.min(link(&clusters[x], &clusters[y]));
                }
            }
            for x in 0..clusters.len() {
                for y in x + 1..clusters.len() {
                    if link(&clusters[x], &clusters[y]) == min {
                        let mut next = clusters.clone();
                        let moved = next.remove(y);
                        next[x].extend(moved);
                        rec(dm, next, k, out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        rec(dm, (0..dm.n()).map(|i| vec![i]).collect(), k, &mut out);
        out
    }

    #[test]
    fn two_triples_split() {
        let dm = two_triples();
        let outcomes = all_greedy_outcomes(&dm, 2);
        assert_eq!(outcomes, vec![vec![0, 0, 0, 1, 1, 1]]);
        assert_eq!(agglomerate(&dm, 2).unwrap().assignment, outcomes[0]);
    }

    #[test]
    fn matches_reference_on_ties() {
        // all-equal distances exercise the tie rule at every step
        let dm = DistanceMatrix::from_upper(5, &[1.0; 10]).unwrap();
        assert_eq!(linkage(&dm), reference_linkage(&dm));
        let dm = DistanceMatrix::from_upper(5, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(linkage(&dm), reference_linkage(&dm));
    }

    fn random_dm(n: usize, seed: u64, levels: u32) -> DistanceMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let upper: Vec<f64> = (0..n * (n - 1) / 2)
            .map(|_| rng.random_range(0..levels) as f64)
            .collect();
        DistanceMatrix::from_upper(n, &upper).unwrap()
    }

    #[test]
    fn matches_reference_random() {
        for seed in 0..100 {
            let n = 2 + (seed as usize % 12);
            let dm = random_dm(n, seed, if seed % 2 == 0 { 4 } else { 1000 });
            assert_eq!(linkage(&dm), reference_linkage(&dm), "seed {seed}");
        }
    }

    #[test]
    fn monotone_transform_keeps_partitions() {
        for seed in 0..20 {
            let dm = random_dm(9, seed, 1_000_000);
            let t = dm.map(|v| (v + 1.0).ln() * 3.0 + 7.0);
            for k in 1..=9 {
                assert_eq!(agglomerate(&dm, k).unwrap(), agglomerate(&t, k).unwrap());
            }
        }
    }

    #[test]
    fn relabeling_invariance() {
        let dm = random_dm(8, 3, 1_000_000);
        let perm = [5, 2, 7, 0, 3, 6, 1, 4];
        let n = 8;
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = dm.get(perm[i], perm[j]);
            }
        }
        let permuted = DistanceMatrix::from_full(n, v).unwrap();
        for k in 1..=n {
            let a = agglomerate(&dm, k).unwrap();
            let b = agglomerate(&permuted, k).unwrap();
            // same grouping: members i, j together in `a` iff perm^-1 positions together in `b`
            for x in 0..n {
                for y in 0..n {
                    let together_b = b.assignment[x] == b.assignment[y];
                    let together_a = a.assignment[perm[x]] == a.assignment[perm[y]];
                    assert_eq!(together_a, together_b);
                }
            }
        }
    }

    fn axis(n: usize) -> TimeAxis {
        TimeAxis::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn cluster_model_means() {
        let s = ShotSet::from_rows(axis(2), vec![vec![0.0, 4.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(cluster_model(&s, &[0]).unwrap().values(), &[0.0, 4.0]);
        assert_eq!(cluster_model(&s, &[0, 1]).unwrap().values(), &[1.0, 4.0]);
        assert!(cluster_model(&s, &[]).is_err());
        let copies = ShotSet::from_rows(axis(2), vec![vec![1.5, 2.5]; 5]).unwrap();
        assert_eq!(cluster_model(&copies, &[0, 1, 2, 3, 4]).unwrap().values(), &[1.5, 2.5]);
    }

    #[test]
    fn silhouette_value_cases() {
        assert_eq!(silhouette_value(1.0, 3.0), 2.0 / 3.0);
        assert_eq!(silhouette_value(2.5, 2.5), 0.0);
        assert_eq!(silhouette_value(3.0, 1.0), -2.0 / 3.0);
        assert_eq!(silhouette_value(0.0, 0.0), 0.0);
    }

    /// Two well-separated groups of traces: 3 low-rate and 3 high-rate shots.
    fn two_group_set() -> ShotSet {
        let rows = vec![
            vec![1.0, 2.0, 1.0, 2.0],
            vec![1.2, 1.8, 1.1, 2.1],
            vec![0.9, 2.1, 1.0, 1.9],
            vec![30.0, 5.0, 30.0, 5.0],
            vec![31.0, 5.2, 29.0, 4.9],
            vec![29.5, 4.8, 30.5, 5.1],
        ];
        ShotSet::from_rows(axis(4), rows).unwrap()
    }

    #[test]
    fn silhouette_well_separated() {
        let set = two_group_set();
        let members: Vec<usize> = (0..6).collect();
        let roi = Roi::new(0.0, 4.0).unwrap();
        let dm = distance_matrix(&set, &members, &roi, 1e-3).unwrap();
        let p = agglomerate(&dm, 2).unwrap();
        assert_eq!(p.assignment, vec![0, 0, 0, 1, 1, 1]);
        let r = silhouette(&set, &members, &p, &roi, 1e-3, false).unwrap();
        assert!(r.quality > 0.8, "{r:?}");
        assert!(r.per_member.iter().all(|s| (-1.0..=1.0).contains(s)));
        assert!(r.per_cluster_mean.iter().all(|&m| r.quality <= m));
        let rn = silhouette(&set, &members, &p, &roi, 1e-3, true).unwrap();
        assert!(rn.per_member.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn silhouette_singleton_scores_zero() {
        let set = two_group_set();
        let members: Vec<usize> = (0..6).collect();
        let p = Partition::new(2, vec![0, 0, 0, 0, 0, 1]).unwrap();
        let r = silhouette(&set, &members, &p, &Roi::new(0.0, 4.0).unwrap(), 1e-3, false).unwrap();
        assert_eq!(r.per_member[5], 0.0);
        assert_eq!(r.per_cluster_mean[1], 0.0);
    }

    #[test]
    fn silhouette_needs_two_clusters() {
        let set = two_group_set();
        let p = Partition::new(1, vec![0; 6]).unwrap();
        let members: Vec<usize> = (0..6).collect();
        assert!(silhouette(&set, &members, &p, &Roi::new(0.0, 4.0).unwrap(), 1e-3, false).is_err());
    }

    #[test]
    fn select_two_groups() {
        let set = two_group_set();
        let members: Vec<usize> = (0..6).collect();
        let roi = Roi::new(0.0, 4.0).unwrap();
        let sel = select_num_clusters(&set, &members, &roi, 4, 1e-3).unwrap();
        assert_eq!(sel.k_best, 2);
        assert_eq!(sel.quality.len(), 3);
        let only = select_num_clusters(&set, &members, &roi, 2, 1e-3).unwrap();
        assert_eq!((only.k_best, only.quality.len()), (2, 1));
        assert!(select_num_clusters(&set, &members, &roi, 6, 1e-3).is_err());
    }

    #[test]
    fn select_three_groups() {
        let mut rows = Vec::new();
        for (a, b) in [(1.0, 20.0), (20.0, 1.0), (40.0, 40.0)] {
            for j in 0..4 {
                let e = 0.05 * j as f64;
                rows.push(vec![a + e, b - e, a - e, b + e]);
            }
        }
        let set = ShotSet::from_rows(axis(4), rows).unwrap();
        let members: Vec<usize> = (0..12).collect();
        let sel = select_num_clusters(&set, &members, &Roi::new(0.0, 4.0).unwrap(), 5, 1e-3).unwrap();
        assert_eq!(sel.k_best, 3, "{:?}", sel.quality);
    }
}
