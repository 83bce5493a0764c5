//! Pairwise likelihood distances among the brightest shots, complete-linkage
//! clustering and silhouette-based choice of the number of clusters.

use shotsort::cluster::{agglomerate, linkage, select_num_clusters, silhouette};
use shotsort::distance::{distance_matrix, Roi, DEFAULT_MODEL_FLOOR};
use shotsort::signal::{default_ranking_window, rank_shots};
use shotsort::sim::{generate_experiment, SimConfig};

fn main() -> shotsort::Result<()> {
    let mut cfg = SimConfig::desk_scale_ab();
    cfg.n_shots = 5_000;
    let exp = generate_experiment(&cfg)?;
    let set = &exp.set;

    let ranking = rank_shots(set, &default_ranking_window(set)?)?;
    let members = ranking.top(30);
    let roi = Roi::new(3.0, 30.0)?;
    let dm = distance_matrix(set, members, &roi, DEFAULT_MODEL_FLOOR)?;

    let merges = linkage(&dm);
    println!("last merges (kept <- absorbed at distance):");
    for m in merges.iter().rev().take(4) {
        println!("  {:>2} <- {:>2} at {:.2}", m.kept, m.absorbed, m.distance);
    }

    let partition = agglomerate(&dm, 2)?;
    let report = silhouette(set, members, &partition, &roi, DEFAULT_MODEL_FLOOR, false)?;
    println!("cluster sizes {:?}, per-cluster mean silhouette {:.3?}", partition.sizes(), report.per_cluster_mean);
    println!("clustering quality S = {:.3}", report.quality);

    // labels are read here only to show how the blind clusters line up
    let labels = set.labels().expect("labeled");
    for (c, cluster) in partition.clusters().iter().enumerate() {
        let ones = cluster.iter().filter(|&&p| labels[members[p]] == 1).count();
        println!("  cluster {c}: {} shots, {ones} of them from class 1", cluster.len());
    }

    let sel = select_num_clusters(set, members, &roi, 5, DEFAULT_MODEL_FLOOR)?;
    println!("quality per k: {:.3?} -> k = {}", sel.quality, sel.k_best);
    Ok(())
}
