//! Generate the two-class benchmark, store it as a bundle and read it back.
//!
//! Run with `cargo run --release --example simulate_dataset -- [n_shots]`.

use shotsort::dataset::{read_bundle, write_bundle};
use shotsort::sim::{generate_experiment, SimConfig};

fn main() -> shotsort::Result<()> {
    let n_shots = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let mut cfg = SimConfig::desk_scale_ab();
    cfg.n_shots = n_shots;
    let exp = generate_experiment(&cfg)?;

    let mut photons = exp.photons.clone();
    photons.sort_unstable();
    let mean = photons.iter().sum::<u64>() as f64 / photons.len() as f64;
    println!(
        "{} shots, photons per shot: mean {:.1}, median {}, max {}",
        n_shots,
        mean,
        photons[photons.len() / 2],
        photons[photons.len() - 1]
    );
    let labels = exp.set.labels().expect("simulated sets are labeled");
    let class1 = labels.iter().filter(|&&l| l == 1).count();
    println!("class balance: {} / {}", n_shots - class1, class1);

    let dir = std::env::temp_dir().join("shotsort-example");
    std::fs::create_dir_all(&dir).map_err(|e| shotsort::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("benchmark.bundle");
    write_bundle(&exp.set, &path)?;
    let back = read_bundle(&path)?;
    let max_err = exp
        .set
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("bundle {} written; max roundtrip error {max_err:.2e} (f32 storage)", path.display());
    println!("metadata: {:?}", back.meta());
    Ok(())
}
