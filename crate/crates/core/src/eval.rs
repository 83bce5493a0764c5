//! Comparison of a blind assignment with ground-truth labels.
//!
//! Only this module reads labels.

use serde::Serialize;

use crate::dataset::ShotSet;
use crate::error::{invalid, Result};
use crate::pipeline::permutations;

/// Accuracy within one photon-number bin `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinAccuracy {
    pub lo: f64,
    pub hi: f64,
    pub n_shots: usize,
    /// `None` for empty bins.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelEvaluation {
    /// `mapping[c]` is the label matched to class `c`.
    pub mapping: Vec<u8>,
    pub n_correct: usize,
    pub accuracy: f64,
    /// `confusion[c][l]`: shots of class `c` carrying label `l`.
    pub confusion: Vec<Vec<usize>>,
    pub binned: Vec<BinAccuracy>,
}

/// Best class-to-label matching of `assignment`.
///
/// With at most as many classes as labels the matching is injective; extra
/// classes beyond the label count take their majority label.
/// `photons` (one value per shot) and increasing `bin_edges` give accuracy per
/// bin; the last bin is open-ended.
pub fn evaluate_against_labels(
    set: &ShotSet,
    assignment: &[usize],
    photons: Option<&[f64]>,
    bin_edges: &[f64],
) -> Result<LabelEvaluation> {
    let labels = set
        .labels()
        .ok_or_else(|| invalid("evaluation needs a labeled shot set"))?;
    if assignment.len() != labels.len() {
        return Err(invalid(format!(
            "assignment has {} entries for {} shots",
            assignment.len(),
            labels.len()
        )));
    }
    if let Some(p) = photons {
        if p.len() != labels.len() {
            return Err(invalid("photon numbers do not match the number of shots"));
        }
    }
    if bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("bin edges must be strictly increasing"));
    }
    let k = assignment.iter().max().map_or(1, |&m| m + 1);
    let n_labels = labels.iter().max().map_or(1, |&m| m as usize + 1);
    let mut confusion = vec![vec![0usize; n_labels]; k];
    for (&c, &l) in assignment.iter().zip(labels) {
        confusion[c][l as usize] += 1;
    }

    let mapping: Vec<u8> = if k <= n_labels {
        permutations(n_labels)
            .into_iter()
            .map(|p| {
                let hits: usize = (0..k).map(|c| confusion[c][p[c]]).sum();
                (hits, p)
            })
            // first maximum in lexicographic order
            .fold(None::<(usize, Vec<usize>)>, |best, cur| match best {
                Some(b) if b.0 >= cur.0 => Some(b),
                _ => Some(cur),
            })
            .map(|(_, p)| p[..k].iter().map(|&l| l as u8).collect())
            .expect("at least one permutation")
    } else {
        confusion
            .iter()
            .map(|row| {
                let best = row.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)));
                best.map_or(0, |(l, _)| l as u8)
            })
            .collect()
    };

    let correct: Vec<bool> = assignment
        .iter()
        .zip(labels)
        .map(|(&c, &l)| mapping[c] == l)
        .collect();
    let n_correct = correct.iter().filter(|&&x| x).count();

    let binned = match photons {
        None => Vec::new(),
        Some(p) => (0..bin_edges.len())
            .map(|b| {
                let lo = bin_edges[b];
                let hi = bin_edges.get(b + 1).copied().unwrap_or(f64::INFINITY);
                let (mut n, mut hit) = (0usize, 0usize);
                for (x, ok) in p.iter().zip(&correct) {
                    if *x >= lo && *x < hi {
                        n += 1;
                        hit += usize::from(*ok);
                    }
                }
                BinAccuracy {
                    lo,
                    hi,
                    n_shots: n,
                    accuracy: (n > 0).then(|| hit as f64 / n as f64),
                }
            })
            .collect(),
    };

    Ok(LabelEvaluation {
        mapping,
        n_correct,
        accuracy: n_correct as f64 / labels.len().max(1) as f64,
        confusion,
        binned,
    })
}
