//! Ground-truth synthetic shot generation.
//!
//! Each shot draws a class, a photon number from a gamma-mixed Poisson law,
//! photon arrival times from the class intensity, and stamps the detector
//! response at each arrival. Baseline noise, saturation and clamping follow.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ShotSet, META_SINGLE_PHOTON_AREA};
use crate::distance::Roi;
use crate::error::{invalid, io_err, Result};
use crate::trace::{detector_kernel, DetectorKernel, TimeAxis, Trace};

/// Decaying intensity with a single quantum-beat modulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIntensity {
    pub amplitude: f64,
    pub lifetime_ns: f64,
    pub beat_period_ns: f64,
    pub beat_phase_rad: f64,
    pub beat_contrast: f64,
}

impl ClassIntensity {
    fn validate(&self) -> Result<()> {
        if !(self.lifetime_ns > 0.0) || !(self.beat_period_ns > 0.0) {
            return Err(invalid("lifetime_ns and beat_period_ns must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beat_contrast) {
            return Err(invalid("beat_contrast must lie in [0, 1]"));
        }
        if !(self.amplitude >= 0.0) {
            return Err(invalid("amplitude must be non-negative"));
        }
        Ok(())
    }
}

/// `A exp(-t/τ) [1 + c cos(2π t / T + φ)] / (1 + c)`, zero before `t = 0`.
pub fn intensity(c: &ClassIntensity, t_ns: f64) -> f64 {
    if t_ns < 0.0 {
        return 0.0;
    }
    let beat = 1.0 + c.beat_contrast * (2.0 * PI * t_ns / c.beat_period_ns + c.beat_phase_rad).cos();
    (c.amplitude * (-t_ns / c.lifetime_ns).exp() * beat / (1.0 + c.beat_contrast)).max(0.0)
}

/// Discretized arrival-time density with inverse-CDF sampling.
///
/// Bin `i` covers `[t_i, t_i + dt)`; a drawn bin is jittered uniformly
/// within it.
#[derive(Clone, Debug)]
pub struct ArrivalSampler {
    axis: TimeAxis,
    cdf: Vec<f64>,
}

impl ArrivalSampler {
    pub fn from_weights(axis: TimeAxis, weights: &[f64]) -> Result<Self> {
        if weights.len() != axis.n_samples() {
            return Err(invalid("weight count does not match the axis"));
        }
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in weights {
            acc += w.max(0.0);
            cdf.push(acc);
        }
        if !(acc > 0.0 && acc.is_finite()) {
            return Err(invalid("arrival density has no mass"));
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        Ok(Self { axis, cdf })
    }

    /// Density from a class intensity evaluated at bin centres.
    pub fn from_intensity(axis: TimeAxis, c: &ClassIntensity) -> Result<Self> {
        let half = 0.5 * axis.dt_ns();
        let w: Vec<f64> = axis.times().map(|t| intensity(c, t + half)).collect();
        Self::from_weights(axis, &w)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let bin = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        let jitter: f64 = rng.random();
        self.axis.time(bin) + jitter * self.axis.dt_ns()
    }
}

/// Gamma-distributed pulse energy followed by Poisson photon counting.
pub fn draw_photon_count<R: Rng + ?Sized>(mean: f64, shape: f64, rng: &mut R) -> u64 {
    let energy = Gamma::new(shape, mean / shape)
        .expect("mean and shape must be positive")
        .sample(rng);
    if !(energy > 0.0) {
        return 0;
    }
    Poisson::new(energy)
        .expect("positive rate")
        .sample(rng) as u64
}

/// Detector response settings of a simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub fwhm_ns: f64,
    /// Area of one photon pulse in output units (1 = photon-equivalents).
    pub area: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedClass {
    pub intensity: ClassIntensity,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub axis: TimeAxis,
    pub classes: Vec<WeightedClass>,
    pub mean_photons: f64,
    pub gamma_shape: f64,
    pub kernel: KernelSpec,
    /// Clip level in photon-equivalents per bin.
    pub saturation_level: Option<f64>,
    pub baseline_noise_sigma: f64,
    pub n_shots: usize,
    pub rng_seed: u64,
}

impl SimConfig {
    /// The desk-scale A/B benchmark: two classes differing only in beat phase.
    pub fn desk_scale_ab() -> Self {
        let class = |phase: f64| WeightedClass {
            intensity: ClassIntensity {
                amplitude: 1.0,
                lifetime_ns: 60.0,
                beat_period_ns: 18.0,
                beat_phase_rad: phase,
                beat_contrast: 0.8,
            },
            probability: 0.5,
        };
        Self {
            axis: TimeAxis::spanning(0.0, 150.0, 0.5).expect("static axis"),
            classes: vec![class(0.0), class(PI / 2.0)],
            mean_photons: 30.0,
            gamma_shape: 1.5,
            kernel: KernelSpec {
                fwhm_ns: 2.5,
                area: 1.0,
            },
            saturation_level: Some(8.0),
            baseline_noise_sigma: 0.05,
            n_shots: 20_000,
            rng_seed: 20_240_601,
        }
    }

    /// Same scenario restricted to one class.
    pub fn single_class(&self, class: usize) -> Self {
        let mut cfg = self.clone();
        cfg.classes = vec![WeightedClass {
            probability: 1.0,
            ..self.classes[class]
        }];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(invalid("at least one class is required"));
        }
        if self.classes.len() > 256 {
            return Err(invalid("at most 256 classes fit in byte labels"));
        }
        let total: f64 = self.classes.iter().map(|c| c.probability).sum();
        if (total - 1.0).abs() > 1e-9 || self.classes.iter().any(|c| c.probability < 0.0) {
            return Err(invalid(format!(
                "mixing probabilities must be non-negative and sum to 1 (sum {total})"
            )));
        }
        for c in &self.classes {
            c.intensity.validate()?;
        }
        if !(self.mean_photons > 0.0) || !(self.gamma_shape > 0.0) {
            return Err(invalid("mean_photons and gamma_shape must be positive"));
        }
        if !(self.baseline_noise_sigma >= 0.0) {
            return Err(invalid("baseline_noise_sigma must be non-negative"));
        }
        if let Some(s) = self.saturation_level {
            if !(s > 0.0) {
                return Err(invalid("saturation_level must be positive"));
            }
        }
        self.build_kernel()?;
        Ok(())
    }

    pub fn build_kernel(&self) -> Result<DetectorKernel> {
        detector_kernel(self.kernel.fwhm_ns, self.axis.dt_ns(), self.kernel.area)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }
}

/// Per-shot RNG stream: identical for a given `(seed, index)` regardless of
/// scheduling.
pub fn shot_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Detector-side rendering shared by the simulator and the calibration.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub axis: TimeAxis,
    pub kernel: DetectorKernel,
    pub baseline_noise_sigma: f64,
    pub saturation_level: Option<f64>,
}

impl Renderer {
    pub fn noiseless(axis: TimeAxis, kernel: DetectorKernel) -> Self {
        Self {
            axis,
            kernel,
            baseline_noise_sigma: 0.0,
            saturation_level: None,
        }
    }

    pub fn render<R: Rng + ?Sized>(&self, sampler: &ArrivalSampler, n_photons: u64, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.axis.n_samples()];
        for _ in 0..n_photons {
            let t = sampler.sample(rng);
            self.kernel.stamp(&self.axis, t, &mut out);
        }
        if self.baseline_noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.baseline_noise_sigma).expect("positive sigma");
            out.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        if let Some(level) = self.saturation_level {
            let cap = level / self.axis.dt_ns();
            out.iter_mut().for_each(|v| *v = v.min(cap));
        }
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        out
    }
}

impl SimConfig {
    pub fn renderer(&self) -> Result<Renderer> {
        Ok(Renderer {
            axis: self.axis,
            kernel: self.build_kernel()?,
            baseline_noise_sigma: self.baseline_noise_sigma,
            saturation_level: self.saturation_level,
        })
    }
}

/// One shot of class `c` with exactly `n_photons` detected photons.
pub fn sample_shot<R: Rng + ?Sized>(
    c: &ClassIntensity,
    n_photons: u64,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<Trace> {
    let sampler = ArrivalSampler::from_intensity(cfg.axis, c)?;
    let values = cfg.renderer()?.render(&sampler, n_photons, rng);
    Trace::new(cfg.axis, values)
}

/// A generated data set together with its hidden truth.
#[derive(Clone, Debug)]
pub struct SimulatedExperiment {
    /// Labeled shots in photon-equivalent units.
    pub set: ShotSet,
    /// True photon number of each shot.
    pub photons: Vec<u64>,
}

pub fn generate_experiment(cfg: &SimConfig) -> Result<SimulatedExperiment> {
    cfg.validate()?;
    if cfg.n_shots == 0 {
        return Err(invalid("n_shots must be positive"));
    }
    let renderer = cfg.renderer()?;
    let samplers: Vec<ArrivalSampler> = cfg
        .classes
        .iter()
        .map(|c| ArrivalSampler::from_intensity(cfg.axis, &c.intensity))
        .collect::<Result<_>>()?;
    let mut cumulative = Vec::with_capacity(cfg.classes.len());
    let mut acc = 0.0;
    for c in &cfg.classes {
        acc += c.probability;
        cumulative.push(acc);
    }

    let shots: Vec<(u8, u64, Vec<f64>)> = (0..cfg.n_shots)
        .into_par_iter()
        .map(|i| {
            let mut rng = shot_rng(cfg.rng_seed, i as u64);
            let u: f64 = rng.random::<f64>() * acc;
            let class = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(cfg.classes.len() - 1);
            let n = draw_photon_count(cfg.mean_photons, cfg.gamma_shape, &mut rng);
            let values = renderer.render(&samplers[class], n, &mut rng);
            (class as u8, n, values)
        })
        .collect();

    let mut data = Vec::with_capacity(cfg.n_shots * cfg.axis.n_samples());
    let mut labels = Vec::with_capacity(cfg.n_shots);
    let mut photons = Vec::with_capacity(cfg.n_shots);
    for (label, n, values) in shots {
        labels.push(label);
        photons.push(n);
        data.extend(values);
    }
    let set = ShotSet::new(cfg.axis, cfg.n_shots, data)?
        .with_labels(labels)?
        .with_meta(META_SINGLE_PHOTON_AREA, "1")
        .with_meta("source", "simulated")
        .with_meta("rng_seed", cfg.rng_seed.to_string());
    Ok(SimulatedExperiment { set, photons })
}

/// Window around the largest difference between the normalized arrival
/// densities of two classes, restricted to `t >= min_start_ns`.
///
/// The window is the contiguous region around the maximum of `|p_a - p_b|`
/// where the difference stays above half its maximum.
pub fn max_difference_window(
    a: &ClassIntensity,
    b: &ClassIntensity,
    axis: &TimeAxis,
    min_start_ns: f64,
) -> Result<Roi> {
    const STEPS_PER_NS: f64 = 100.0;
    let (t0, t1) = (axis.t0_ns().max(0.0), axis.end_ns());
    let n = ((t1 - t0) * STEPS_PER_NS).round() as usize;
    let h = (t1 - t0) / n as f64;
    let grid: Vec<f64> = (0..n).map(|i| t0 + (i as f64 + 0.5) * h).collect();
    let norm = |c: &ClassIntensity| grid.iter().map(|&t| intensity(c, t)).sum::<f64>() * h;
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(invalid("class intensities must have positive mass"));
    }
    let diff: Vec<f64> = grid
        .iter()
        .map(|&t| (intensity(a, t) / na - intensity(b, t) / nb).abs())
        .collect();
    let start = grid.partition_point(|&t| t < min_start_ns);
    if start >= n {
        return Err(invalid("min_start_ns beyond the axis"));
    }
    let (peak, max) = diff[start..]
        .iter()
        .enumerate()
        .fold((start, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (start + i, v)
            } else {
                (bi, bv)
            }
        });
    let half = 0.5 * max;
    let mut lo = peak;
    while lo > start && diff[lo - 1] >= half {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < n && diff[hi + 1] >= half {
        hi += 1;
    }
    Roi::new(grid[lo] - 0.5 * h, grid[hi] + 0.5 * h)
}
