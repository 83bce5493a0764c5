//! Build class models, sort every shot, average the classes and score the
//! result against the simulator's labels.
//!
//! Arguments: `n_hs roi_start roi_end` (defaults 100 3 30).

use shotsort::dataset::{export_curves, Curve};
use shotsort::distance::Roi;
use shotsort::eval::evaluate_against_labels;
use shotsort::pipeline::{analyze, fit_scale, AnalysisParams};
use shotsort::sim::{generate_experiment, SimConfig};

fn main() -> shotsort::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (n_hs, start, end) = match args[..] {
        [n, s, e] => (n as usize, s, e),
        _ => (100, 3.0, 30.0),
    };
    let exp = generate_experiment(&SimConfig::desk_scale_ab())?;
    let set = &exp.set;
    let params = AnalysisParams::new(n_hs, Roi::new(start, end)?, 2);
    let result = analyze(set, &params)?;
    println!("class sizes {:?}, scale factors {:.3?}", result.class_sizes(), result.scale_factors);

    let photons: Vec<f64> = exp.photons.iter().map(|&p| p as f64).collect();
    let ev = evaluate_against_labels(set, &result.assignment, Some(&photons), &[0.0, 20.0, 50.0, 100.0])?;
    println!("accuracy {:.3}", ev.accuracy);
    for b in &ev.binned {
        println!("  photons [{:>3}, {:>4}): {:>5} shots, accuracy {:?}", b.lo, b.hi, b.n_shots, b.accuracy);
    }

    let window = Roi::new(0.0, 100.0)?;
    let a = &result.class_curves[0].mean;
    let b = &result.class_curves[1].mean;
    println!("class 1 scaled onto class 0 by {:.3}", fit_scale(b, a, &window)?);

    let curves: Vec<Curve> = result
        .class_curves
        .iter()
        .enumerate()
        .map(|(c, band)| Curve::new(format!("class{c}"), band.mean.clone()).with_sigma(band.sigma.clone()))
        .collect();
    let path = std::env::temp_dir().join("shotsort-class-curves.csv");
    export_curves(&curves, &path)?;
    println!("class curves written to {}", path.display());
    Ok(())
}
