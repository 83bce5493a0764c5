//! Scan (N_hs, ROI) on the two-class benchmark and print the chosen parameters
//! next to the window where the two classes differ most.

use std::time::Instant;

use shotsort::pipeline::{optimize_parameters, ScanConfig};
use shotsort::sim::{generate_experiment, max_difference_window, ClassIntensity, SimConfig};
use shotsort::trace::TimeAxis;

fn main() -> shotsort::Result<()> {
    let cfg = SimConfig::desk_scale_ab();
    let exp = generate_experiment(&cfg)?;

    let clock = Instant::now();
    let opt = optimize_parameters(&exp.set, &ScanConfig::default())?;
    println!("scan took {:.1} s", clock.elapsed().as_secs_f64());
    println!(
        "n_hs = {}, ROI = [{}, {}) ns, smoothed S = {:.4}",
        opt.params.n_hs, opt.params.roi.t_start_ns, opt.params.roi.t_end_ns, opt.quality
    );
    for map in &opt.smoothed_maps {
        let best = map.cells().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
        println!("  n_hs {:>3}: best smoothed S {:.4}", map.n_hs, best);
    }

    let a: &ClassIntensity = &cfg.classes[0].intensity;
    let b: &ClassIntensity = &cfg.classes[1].intensity;
    let axis: TimeAxis = cfg.axis;
    let w = max_difference_window(a, b, &axis, 3.0)?;
    println!("largest class difference in [{}, {}) ns", w.t_start_ns, w.t_end_ns);
    Ok(())
}
