//! Command-line front end.
//!
//! Every subcommand reads a bundle, writes a JSON report plus CSV files into
//! `--out` and prints one summary line per stage. Labels are dropped on input
//! except by `evaluate`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::cluster::select_num_clusters;
use crate::dataset::{
    blind_labels, export_curves, fmt_sig9, read_bundle, write_bundle, Curve, ShotSet, META_SINGLE_PHOTON_AREA,
};
use crate::distance::{Roi, DEFAULT_MODEL_FLOOR};
use crate::error::{invalid, io_err, Error, Result};
use crate::eval::evaluate_against_labels;
use crate::pipeline::{
    analyze, build_models, consistency_tests, optimize_parameters, sort_shots, stability_analysis, AnalysisParams,
    ComparisonConfig, RoiGrid, ScanConfig, SortResult, StabilityConfig, StabilityResult, DEFAULT_N_HS,
};
use crate::signal::{
    calibrate_photon_number, calibration_csv, estimate_photons, rank_shots, rank_shots_unchecked, PROMPT_EXCLUSION_NS,
};
use crate::sim::{generate_experiment, SimConfig};
use crate::trace::{detector_kernel, photon_equivalents, poisson_band};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "shotsort", version, about = "Sort single-shot time traces into dynamics classes")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic bundle.
    Simulate(SimulateArgs),
    /// Rank shots by signal content.
    Rank(RankArgs),
    /// Scan (n_hs, ROI) and pick the best clustering quality.
    Optimize(OptimizeArgs),
    /// Build models and assign every shot.
    Sort(ParamArgs),
    /// Sort and average each class.
    Analyze(ParamArgs),
    /// Resampling spread of the class curves.
    Stability(StabilityArgs),
    /// Forced-split and extra-cluster checks.
    Consistency(ConsistencyArgs),
    /// Photon-number calibration of signal content.
    Calibrate(CalibrateArgs),
    /// rank, optimize, analyze and stability in one run.
    Pipeline(PipelineArgs),
    /// Compare an assignment with ground-truth labels.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct IoArgs {
    /// Input bundle.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulation config (JSON); defaults to the two-class benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output bundle path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_shots: Option<usize>,
    /// Keep only this class of the config.
    #[arg(long)]
    single: Option<usize>,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long, default_value_t = PROMPT_EXCLUSION_NS)]
    roi_min_start_ns: f64,
}

#[derive(Args, Debug, Clone)]
struct ScanArgs {
    /// Comma-separated n_hs candidates.
    #[arg(long, value_delimiter = ',')]
    n_hs: Option<Vec<usize>>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Scan k = 2..=k_max and keep the best (pipeline only).
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    roi_step_ns: f64,
    #[arg(long, default_value_t = PROMPT_EXCLUSION_NS)]
    roi_min_start_ns: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_ns: f64,
    #[arg(long, default_value_t = DEFAULT_MODEL_FLOOR)]
    model_floor: f64,
    /// Normalize silhouette distances by their per-cluster spread.
    #[arg(long)]
    normalize: bool,
}

impl ScanArgs {
    fn config(&self) -> ScanConfig {
        ScanConfig {
            n_hs_candidates: self.n_hs.clone().unwrap_or_else(|| DEFAULT_N_HS.to_vec()),
            grid: RoiGrid {
                step_ns: self.roi_step_ns,
                min_start_ns: self.roi_min_start_ns,
            },
            k: self.k,
            sigma_ns: self.sigma_ns,
            model_floor: self.model_floor,
            normalize_silhouette: self.normalize,
        }
    }
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[command(flatten)]
    io: IoArgs,
    #[command(flatten)]
    scan: ScanArgs,
}

#[derive(Args, Debug, Clone)]
struct ParamSource {
    /// Analysis parameters (JSON, as written by `optimize`).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Single n_hs value, overrides the file.
    #[arg(long)]
    n_hs: Option<usize>,
    /// ROI as `start,end` in ns, overrides the file.
    #[arg(long, value_delimiter = ',')]
    roi: Option<Vec<f64>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    model_floor: Option<f64>,
}

impl ParamSource {
    fn resolve(&self) -> Result<AnalysisParams> {
        let base = match &self.params {
            Some(p) => Some(read_params(p)?),
            None => None,
        };
        let n_hs = self.n_hs.or(base.map(|b| b.n_hs));
        let roi = match (&self.roi, base) {
            (Some(r), _) => match r[..] {
                [start, end] => Some(Roi::new(start, end)?),
                _ => return Err(invalid("--roi takes `start,end` in ns")),
            },
            (None, Some(b)) => Some(b.roi),
            (None, None) => None,
        };
        let (Some(n_hs), Some(roi)) = (n_hs, roi) else {
            return Err(invalid("analysis parameters need --params or both --n-hs and --roi"));
        };
        Ok(AnalysisParams {
            n_hs,
            roi,
            k: self.k.or(base.map(|b| b.k)).unwrap_or(2),
            model_floor: self
                .model_floor
                .or(base.map(|b| b.model_floor))
                .unwrap_or(DEFAULT_MODEL_FLOOR),
        })
    }
}

#[derive(Args, Debug)]
struct ParamArgs {
    #[command(flatten)]
    io: IoArgs,
    #[command(flatten)]
    params: ParamSource,
}

#[derive(Args, Debug, Clone, Copy)]
struct ResampleArgs {
    #[arg(long, default_value_t = 5)]
    subsets: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl ResampleArgs {
    fn config(&self) -> StabilityConfig {
        StabilityConfig {
            n_subsets: self.subsets,
            n_reps: self.reps,
            rng_seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[command(flatten)]
    io: IoArgs,
    #[command(flatten)]
    params: ParamSource,
    #[command(flatten)]
    resample: ResampleArgs,
}

#[derive(Args, Debug)]
struct ConsistencyArgs {
    #[command(flatten)]
    io: IoArgs,
    #[command(flatten)]
    params: ParamSource,
    #[command(flatten)]
    resample: ResampleArgs,
    /// Bundle believed to hold a single class, for the forced-split check.
    #[arg(long)]
    single: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50,100,200")]
    n_values: Vec<u32>,
    #[arg(long, default_value_t = 1000)]
    n_sims: usize,
    #[arg(long, default_value_t = 20.0)]
    tail_start_ns: f64,
    #[arg(long, default_value_t = PROMPT_EXCLUSION_NS)]
    roi_min_start_ns: f64,
    /// Detector response width.
    #[arg(long, default_value_t = 2.5)]
    fwhm_ns: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    io: IoArgs,
    #[command(flatten)]
    scan: ScanArgs,
    #[command(flatten)]
    resample: ResampleArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Labeled bundle.
    #[arg(long)]
    input: PathBuf,
    /// Assignment CSV written by `sort` or `analyze`.
    #[arg(long)]
    assignment: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Calibration CSV; enables accuracy binned by estimated photon number.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Lower edges of the photon-number bins.
    #[arg(long, value_delimiter = ',', default_value = "0,20,50,100")]
    bins: Vec<f64>,
}

/// Parse `argv` (including the program name), run, and return the exit code:
/// 0 on success, 2 on usage errors, 1 on data errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Rank(a) => rank(a),
        Command::Optimize(a) => optimize(a),
        Command::Sort(a) => sort(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Stability(a) => stability(a),
        Command::Consistency(a) => consistency(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

/// Read a bundle for analysis: labels dropped, converted to photon-equivalents
/// when the bundle records a single-photon area.
fn load_blind(path: &Path) -> Result<ShotSet> {
    let set = blind_labels(&read_bundle(path)?);
    to_photon_equivalents(set, path)
}

fn to_photon_equivalents(set: ShotSet, path: &Path) -> Result<ShotSet> {
    let Some(raw) = set.meta().get(META_SINGLE_PHOTON_AREA) else {
        return Ok(set);
    };
    let area: f64 = raw.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: format!("{META_SINGLE_PHOTON_AREA} is not a number: {raw:?}"),
    })?;
    if area == 1.0 {
        return Ok(set);
    }
    let traces = (0..set.n_shots())
        .map(|i| photon_equivalents(&set.shot(i), area))
        .collect::<Result<Vec<_>>>()?;
    let mut out = ShotSet::from_traces(&traces)?;
    for (k, v) in set.meta() {
        out = out.with_meta(k.clone(), v.clone());
    }
    Ok(out.with_meta(META_SINGLE_PHOTON_AREA, "1"))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn read_params(path: &Path) -> Result<AnalysisParams> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    // accept either a bare params object or a report holding one
    let node = v.get("params").cloned().unwrap_or(v);
    serde_json::from_value(node).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("not analysis parameters: {e}"),
    })
}

fn write_report(dir: &Path, name: &str, command: &str, body: Value) -> Result<PathBuf> {
    let generated_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "generated_at": generated_at,
    });
    if let (Some(r), Value::Object(b)) = (report.as_object_mut(), body) {
        r.extend(b);
    }
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&report)?;
    write_text(&path, &(text + "\n"))?;
    Ok(path)
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SimConfig::load(p).map_err(|e| with_path(e, p))?,
        None => SimConfig::desk_scale_ab(),
    };
    if let Some(s) = a.seed {
        cfg.rng_seed = s;
    }
    if let Some(n) = a.n_shots {
        cfg.n_shots = n;
    }
    if let Some(c) = a.single {
        if c >= cfg.classes.len() {
            return Err(invalid(format!("--single {c}: config has {} classes", cfg.classes.len())));
        }
        cfg = cfg.single_class(c);
    }
    cfg.validate()?;
    let exp = generate_experiment(&cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out(parent)?;
    }
    write_bundle(&exp.set, &a.out)?;
    let mean_photons = exp.photons.iter().sum::<u64>() as f64 / exp.photons.len().max(1) as f64;
    println!(
        "simulate: {} shots x {} samples, mean {:.1} photons/shot -> {}",
        exp.set.n_shots(),
        exp.set.n_samples(),
        mean_photons,
        a.out.display()
    );
    Ok(())
}

/// Config errors that do not carry a path get one.
fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { .. } | Error::Format { .. } => e,
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn ranking_window(set: &ShotSet, min_start_ns: f64) -> Result<Roi> {
    Roi::new(min_start_ns.max(set.axis().t0_ns()), set.axis().end_ns())
}

fn rank(a: RankArgs) -> Result<()> {
    let set = load_blind(&a.io.input)?;
    prepare_out(&a.io.out)?;
    let window = ranking_window(&set, a.roi_min_start_ns)?;
    let ranking = if a.roi_min_start_ns < PROMPT_EXCLUSION_NS {
        rank_shots_unchecked(&set, &window)?
    } else {
        rank_shots(&set, &window)?
    };
    let mut csv = String::from("rank,shot,content\n");
    for (r, &i) in ranking.order.iter().enumerate() {
        let _ = writeln!(csv, "{r},{i},{}", fmt_sig9(ranking.content[i]));
    }
    write_text(&a.io.out.join("ranking.csv"), &csv)?;
    let top = ranking.order.first().copied();
    write_report(
        &a.io.out,
        "report.json",
        "rank",
        json!({ "input": a.io.input, "window": window, "n_shots": set.n_shots(), "top_shot": top }),
    )?;
    println!(
        "rank: {} shots over [{}, {}) ns, top content {}",
        set.n_shots(),
        window.t_start_ns,
        window.t_end_ns,
        top.map_or("-".into(), |i| fmt_sig9(ranking.content[i]))
    );
    Ok(())
}

fn write_quality_maps(dir: &Path, opt: &crate::pipeline::Optimization) -> Result<Vec<Value>> {
    let mut files = Vec::new();
    for (raw, smooth) in opt.raw_maps.iter().zip(&opt.smoothed_maps) {
        let raw_name = format!("quality_raw_nhs{}.csv", raw.n_hs);
        let smooth_name = format!("quality_smoothed_nhs{}.csv", raw.n_hs);
        write_text(&dir.join(&raw_name), &raw.to_csv())?;
        write_text(&dir.join(&smooth_name), &smooth.to_csv())?;
        let best = smooth.cells().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
        files.push(json!({ "n_hs": raw.n_hs, "raw": raw_name, "smoothed": smooth_name, "best_smoothed": best }));
    }
    Ok(files)
}

fn run_optimize(set: &ShotSet, scan: &ScanConfig, out: &Path) -> Result<(AnalysisParams, Value)> {
    let opt = optimize_parameters(set, scan)?;
    let maps = write_quality_maps(out, &opt)?;
    let params_text = serde_json::to_string_pretty(&opt.params)? + "\n";
    write_text(&out.join("params.json"), &params_text)?;
    println!(
        "optimize: n_hs {} ROI [{}, {}) ns, smoothed S {:.4}",
        opt.params.n_hs, opt.params.roi.t_start_ns, opt.params.roi.t_end_ns, opt.quality
    );
    let body = json!({
        "params": opt.params,
        "quality": opt.quality,
        "raw_quality": opt.raw_quality,
        "scan": scan,
        "quality_maps": maps,
    });
    Ok((opt.params, body))
}

fn optimize(a: OptimizeArgs) -> Result<()> {
    let set = load_blind(&a.io.input)?;
    prepare_out(&a.io.out)?;
    let (_, mut body) = run_optimize(&set, &a.scan.config(), &a.io.out)?;
    body["input"] = to_value(&a.io.input)?;
    write_report(&a.io.out, "report.json", "optimize", body)?;
    Ok(())
}

fn assignment_csv(assignment: &[usize]) -> String {
    let mut csv = String::from("shot,class\n");
    for (i, c) in assignment.iter().enumerate() {
        let _ = writeln!(csv, "{i},{c}");
    }
    csv
}

fn read_assignment(path: &Path, n_shots: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, why: &str| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {why}"),
    };
    let mut out = vec![None; n_shots];
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(s), Some(c), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(ln + 1, "expected `shot,class`"));
        };
        let shot: usize = s.trim().parse().map_err(|_| bad(ln + 1, "shot is not an index"))?;
        let class: usize = c.trim().parse().map_err(|_| bad(ln + 1, "class is not an index"))?;
        if shot >= n_shots {
            return Err(bad(ln + 1, "shot index beyond the bundle"));
        }
        out[shot] = Some(class);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| bad(0, &format!("shot {i} has no class"))))
        .collect()
}

fn model_curves(models: &[crate::trace::Trace]) -> Vec<Curve> {
    models
        .iter()
        .enumerate()
        .map(|(c, m)| Curve::new(format!("model{c}"), m.clone()))
        .collect()
}

fn sort(a: ParamArgs) -> Result<()> {
    let set = load_blind(&a.io.input)?;
    let params = a.params.resolve()?;
    prepare_out(&a.io.out)?;
    let models = build_models(&set, &params)?;
    let assignment = sort_shots(&set, &models.models, &params.roi, params.model_floor)?;
    write_text(&a.io.out.join("assignment.csv"), &assignment_csv(&assignment))?;
    export_curves(&model_curves(&models.models), a.io.out.join("models.csv"))?;
    let mut counts = vec![0usize; params.k];
    for &c in &assignment {
        counts[c] += 1;
    }
    write_report(
        &a.io.out,
        "report.json",
        "sort",
        json!({
            "input": a.io.input,
            "params": params,
            "model_members": models.members,
            "model_partition": models.partition.assignment,
            "class_counts": counts,
            "files": { "assignment": "assignment.csv", "models": "models.csv" },
        }),
    )?;
    println!("sort: {} shots into class counts {:?}", set.n_shots(), counts);
    Ok(())
}

fn write_analysis(dir: &Path, result: &SortResult, stab: Option<&StabilityResult>) -> Result<Value> {
    write_text(&dir.join("assignment.csv"), &assignment_csv(&result.assignment))?;
    export_curves(&model_curves(&result.models.models), dir.join("models.csv"))?;
    let mut curves = Vec::new();
    for (c, band) in result.class_curves.iter().enumerate() {
        let sigma = match stab {
            Some(s) => s.combined_sigma(c),
            None => band.sigma.clone(),
        };
        curves.push(Curve::new(format!("class{c}"), band.mean.clone()).with_sigma(sigma));
    }
    export_curves(&curves, dir.join("class_curves.csv"))?;
    Ok(json!({
        "class_counts": result.class_sizes(),
        "scale_factors": result.scale_factors,
        "model_members": result.models.members,
        "files": {
            "assignment": "assignment.csv",
            "models": "models.csv",
            "class_curves": "class_curves.csv",
        },
    }))
}

fn analyze_cmd(a: ParamArgs) -> Result<()> {
    let set = load_blind(&a.io.input)?;
    let params = a.params.resolve()?;
    prepare_out(&a.io.out)?;
    let result = analyze(&set, &params)?;
    let mut body = write_analysis(&a.io.out, &result, None)?;
    body["input"] = to_value(&a.io.input)?;
    body["params"] = to_value(&params)?;
    write_report(&a.io.out, "report.json", "analyze", body)?;
    println!(
        "analyze: class counts {:?}, scale factors {:?}",
        result.class_sizes(),
        result.scale_factors.iter().map(|s| fmt_sig9(*s)).collect::<Vec<_>>()
    );
    Ok(())
}

fn write_stability(dir: &Path, stab: &StabilityResult) -> Result<Value> {
    let mut curves = Vec::new();
    for c in 0..stab.mean.len() {
        curves.push(Curve::new(format!("class{c}_resampled"), stab.mean[c].clone()).with_sigma(stab.std[c].clone()));
    }
    export_curves(&curves, dir.join("stability.csv"))?;
    Ok(json!({
        "reconstructions_per_class": stab.n_reconstructions,
        "matchings": stab.matchings,
        "files": { "stability": "stability.csv" },
    }))
}

fn stability(a: StabilityArgs) -> Result<()> {
    let set = load_blind(&a.io.input)?;
    let params = a.params.resolve()?;
    prepare_out(&a.io.out)?;
    let stab = stability_analysis(&set, &params, &a.resample.config())?;
    let mut body = write_stability(&a.io.out, &stab)?;
    body["input"] = to_value(&a.io.input)?;
    body["params"] = to_value(&params)?;
    body["resampling"] = to_value(&a.resample.config())?;
    write_report(&a.io.out, "report.json", "stability", body)?;
    println!(
        "stability: {} runs, reconstructions per class {:?}",
        stab.matchings.len(),
        stab.n_reconstructions
    );
    Ok(())
}

fn consistency(a: ConsistencyArgs) -> Result<()> {
    let set = load_blind(&a.io.input)?;
    let single = a.single.as_deref().map(load_blind).transpose()?;
    let params = a.params.resolve()?;
    prepare_out(&a.io.out)?;
    let cmp = ComparisonConfig::default();
    let rep = consistency_tests(&set, single.as_ref(), &params, &a.resample.config(), &cmp)?;
    write_report(
        &a.io.out,
        "report.json",
        "consistency",
        json!({
            "input": a.io.input,
            "single_class_input": a.single,
            "params": params,
            "comparison": cmp,
            "forced_split": rep.forced_split,
            "forced_split_agrees": rep.forced_split_agrees(),
            "base": rep.base,
            "base_distinct": rep.base_distinct(),
            "extra": rep.extra,
            "extra_agreeing_pairs": rep.extra_agreeing_pairs(),
        }),
    )?;
    println!(
        "consistency: forced split agrees {:?}, k={} distinct {}, k={} agreeing pairs {}",
        rep.forced_split_agrees(),
        params.k,
        rep.base_distinct(),
        params.k + 1,
        rep.extra_agreeing_pairs()
    );
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let set = load_blind(&a.io.input)?;
    prepare_out(&a.io.out)?;
    let all: Vec<usize> = (0..set.n_shots()).collect();
    let avg = poisson_band(&set, &all)?.mean;
    let kernel = detector_kernel(a.fwhm_ns, set.axis().dt_ns(), 1.0)?;
    let end = set.axis().end_ns();
    let tail = Roi::new(a.tail_start_ns, end)?;
    let full = ranking_window(&set, a.roi_min_start_ns)?;
    let cal = calibrate_photon_number(&avg, &kernel, &a.n_values, a.n_sims, &tail, &full, a.seed)?;
    write_text(&a.io.out.join("calibration.csv"), &calibration_csv(&cal))?;
    write_report(
        &a.io.out,
        "report.json",
        "calibrate",
        json!({
            "input": a.io.input,
            "n_sims": a.n_sims,
            "seed": a.seed,
            "fwhm_ns": a.fwhm_ns,
            "calibration": cal,
            "files": { "calibration": "calibration.csv" },
        }),
    )?;
    println!("calibrate: {} photon numbers x {} simulations", cal.entries.len(), a.n_sims);
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let set = load_blind(&a.io.input)?;
    prepare_out(&a.io.out)?;
    let scan = a.scan.config();
    let ranking = rank_shots(&set, &ranking_window(&set, a.scan.roi_min_start_ns.max(PROMPT_EXCLUSION_NS))?)?;
    println!("rank: {} shots ranked", set.n_shots());
    let (mut params, optimize_body) = run_optimize(&set, &scan, &a.io.out)?;

    let mut k_selection = Value::Null;
    if let Some(k_max) = a.scan.k_max {
        let members = ranking.top(params.n_hs);
        let sel = select_num_clusters(&set, members, &params.roi, k_max, params.model_floor)?;
        println!("select: k = {} (quality per k {:?})", sel.k_best, sel.quality);
        params.k = sel.k_best;
        k_selection = json!({ "k_best": sel.k_best, "quality": sel.quality });
    }

    let stab = stability_analysis(&set, &params, &a.resample.config())?;
    let result = &stab.reference;
    println!(
        "analyze: class counts {:?}, scale factors {:?}",
        result.class_sizes(),
        result.scale_factors.iter().map(|s| fmt_sig9(*s)).collect::<Vec<_>>()
    );
    println!("stability: {} runs", stab.matchings.len());
    let analysis = write_analysis(&a.io.out, result, Some(&stab))?;
    let stability_body = write_stability(&a.io.out, &stab)?;
    let params_text = serde_json::to_string_pretty(&params)? + "\n";
    write_text(&a.io.out.join("params.json"), &params_text)?;
    write_report(
        &a.io.out,
        "report.json",
        "pipeline",
        json!({
            "input": a.io.input,
            "params": params,
            "optimize": optimize_body,
            "k_selection": k_selection,
            "analysis": analysis,
            "stability": stability_body,
            "resampling": a.resample.config(),
        }),
    )?;
    Ok(())
}

/// Calibration table as written by `calibrate`.
fn read_calibration_csv(path: &Path) -> Result<Vec<crate::signal::CalibrationEntry>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |why: String| Error::Format {
        path: path.to_path_buf(),
        reason: why,
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 columns in {l:?}")));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("not a number: {s:?}")));
            Ok(crate::signal::CalibrationEntry {
                n: f[0].trim().parse().map_err(|_| bad(format!("not a photon number: {:?}", f[0])))?,
                content_mean: num(f[1])?,
                content_std: num(f[2])?,
            })
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let set = read_bundle(&a.input)?;
    let set = {
        let labels = set.labels().map(<[u8]>::to_vec);
        let converted = to_photon_equivalents(set, &a.input)?;
        match labels {
            Some(l) => converted.with_labels(l)?,
            None => converted,
        }
    };
    if set.labels().is_none() {
        return Err(invalid(format!("{} carries no labels", a.input.display())));
    }
    let assignment = read_assignment(&a.assignment, set.n_shots())?;
    prepare_out(&a.out)?;

    let photons = match &a.calibration {
        None => None,
        Some(p) => {
            let entries = read_calibration_csv(p)?;
            let end = set.axis().end_ns();
            let cal = crate::signal::PhotonCalibration {
                entries,
                tail_window: Roi::new(20.0_f64.min(end - set.axis().dt_ns()), end)?,
                full_window: ranking_window(&set, PROMPT_EXCLUSION_NS)?,
            };
            let est = (0..set.n_shots())
                .map(|i| {
                    let content = crate::signal::signal_content(&set.shot(i), &cal.full_window)?;
                    Ok(match estimate_photons(content, &cal) {
                        Ok((n, _)) => n,
                        Err(Error::OutOfRange { nearest_n, .. }) => nearest_n as f64,
                        Err(e) => return Err(e),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            Some(est)
        }
    };
    let ev = evaluate_against_labels(&set, &assignment, photons.as_deref(), &a.bins)?;
    write_report(
        &a.out,
        "evaluation.json",
        "evaluate",
        json!({
            "input": a.input,
            "assignment": a.assignment,
            "calibration": a.calibration,
            "evaluation": ev,
        }),
    )?;
    println!("evaluate: accuracy {:.4} ({} of {})", ev.accuracy, ev.n_correct, assignment.len());
    Ok(())
}
