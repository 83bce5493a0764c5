//! Rank shots by signal content and convert content to a photon-number
//! estimate with a Monte Carlo calibration.

use shotsort::distance::Roi;
use shotsort::signal::{calibrate_photon_number, default_ranking_window, estimate_photons, rank_shots};
use shotsort::sim::{generate_experiment, SimConfig};
use shotsort::trace::poisson_band;

fn main() -> shotsort::Result<()> {
    let mut cfg = SimConfig::desk_scale_ab();
    cfg.n_shots = 5_000;
    let exp = generate_experiment(&cfg)?;
    let set = &exp.set;

    let window = default_ranking_window(set)?;
    let ranking = rank_shots(set, &window)?;

    let all: Vec<usize> = (0..set.n_shots()).collect();
    let avg = poisson_band(set, &all)?.mean;
    let tail = Roi::new(20.0, set.axis().end_ns())?;
    let cal = calibrate_photon_number(
        &avg,
        &cfg.build_kernel()?,
        &[1, 2, 5, 10, 20, 50, 100, 200, 400],
        500,
        &tail,
        &window,
        11,
    )?;
    println!("{:>5} {:>12} {:>10}", "N", "content", "std");
    for e in &cal.entries {
        println!("{:>5} {:>12.3} {:>10.3}", e.n, e.content_mean, e.content_std);
    }

    println!("\ntop shots: estimated vs true photon number");
    for &i in ranking.top(8) {
        let content = ranking.content[i];
        match estimate_photons(content, &cal) {
            Ok((n, sigma)) => println!("shot {i:>5}: {n:>7.1} ± {sigma:<6.1} (true {})", exp.photons[i]),
            Err(e) => println!("shot {i:>5}: {e}"),
        }
    }
    Ok(())
}
