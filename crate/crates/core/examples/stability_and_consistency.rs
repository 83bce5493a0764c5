//! Resampling stability of the class curves and the cluster-count checks:
//! a one-class set forced into two clusters, and the two-class set split
//! into three.

use shotsort::distance::Roi;
use shotsort::pipeline::{
    compare_classes, consistency_tests, stability_analysis, AnalysisParams, ComparisonConfig, StabilityConfig,
};
use shotsort::sim::{generate_experiment, SimConfig};

fn main() -> shotsort::Result<()> {
    let mut cfg = SimConfig::desk_scale_ab();
    cfg.n_shots = 10_000;
    let two = generate_experiment(&cfg)?.set;
    let one = generate_experiment(&cfg.single_class(0))?.set;

    let params = AnalysisParams::new(50, Roi::new(3.0, 30.0)?, 2);
    let resampling = StabilityConfig { n_subsets: 5, n_reps: 4, rng_seed: 3 };
    let stab = stability_analysis(&two, &params, &resampling)?;
    println!("{} resampled runs, reconstructions per class {:?}", stab.matchings.len(), stab.n_reconstructions);
    for c in 0..params.k {
        let cover = stab.reference_coverage(c, &Roi::full(two.axis()))?;
        let mean_std = stab.std[c].iter().sum::<f64>() / stab.std[c].len() as f64;
        println!("  class {c}: mean resampling std {mean_std:.4}, full run inside band in {:.1} % of bins", 100.0 * cover);
    }
    let cmp = ComparisonConfig::default();
    for p in compare_classes(&stab, &cmp)? {
        println!("  classes {} and {}: {:.1} % of bins agree", p.a, p.b, 100.0 * p.fraction_within);
    }

    let rep = consistency_tests(&two, Some(&one), &params, &resampling, &cmp)?;
    println!("one class forced into two clusters agrees: {:?}", rep.forced_split_agrees());
    println!("two classes with k = 2 are distinct: {}", rep.base_distinct());
    println!("two classes with k = 3, agreeing pairs: {}", rep.extra_agreeing_pairs());
    Ok(())
}
