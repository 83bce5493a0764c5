//! Trace representation, detector response and Poisson uncertainty bands.

use serde::{Deserialize, Serialize};

use crate::dataset::ShotSet;
use crate::error::{invalid, Result};

/// Uniform sampling grid shared by all traces of a data set.
///
/// Sample `i` sits at `t0_ns + i * dt_ns` and represents the bin
/// `[t_i, t_i + dt_ns)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAxis")]
pub struct TimeAxis {
    t0_ns: f64,
    dt_ns: f64,
    n_samples: usize,
}

#[derive(Deserialize)]
struct RawAxis {
    t0_ns: f64,
    dt_ns: f64,
    n_samples: usize,
}

impl TryFrom<RawAxis> for TimeAxis {
    type Error = crate::Error;

    fn try_from(r: RawAxis) -> Result<Self> {
        Self::new(r.t0_ns, r.dt_ns, r.n_samples)
    }
}

impl TimeAxis {
    pub fn new(t0_ns: f64, dt_ns: f64, n_samples: usize) -> Result<Self> {
        if !t0_ns.is_finite() {
            return Err(invalid("t0_ns must be finite"));
        }
        if !(dt_ns > 0.0 && dt_ns.is_finite()) {
            return Err(invalid(format!("dt_ns must be positive, got {dt_ns}")));
        }
        if n_samples < 2 {
            return Err(invalid(format!("axis needs at least 2 samples, got {n_samples}")));
        }
        Ok(Self {
            t0_ns,
            dt_ns,
            n_samples,
        })
    }

    /// Axis covering `[t0_ns, t_end_ns)` with spacing `dt_ns`.
    pub fn spanning(t0_ns: f64, t_end_ns: f64, dt_ns: f64) -> Result<Self> {
        if !(dt_ns > 0.0) {
            return Err(invalid(format!("dt_ns must be positive, got {dt_ns}")));
        }
        let n = ((t_end_ns - t0_ns) / dt_ns).round();
        if !(n >= 2.0) {
            return Err(invalid("axis span must cover at least 2 samples"));
        }
        Self::new(t0_ns, dt_ns, n as usize)
    }

    #[inline]
    pub fn t0_ns(&self) -> f64 {
        self.t0_ns
    }

    #[inline]
    pub fn dt_ns(&self) -> f64 {
        self.dt_ns
    }

    #[inline]
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.t0_ns + i as f64 * self.dt_ns
    }

    /// End of the last bin, `t0 + n * dt`.
    #[inline]
    pub fn end_ns(&self) -> f64 {
        self.time(self.n_samples)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_samples).map(|i| self.time(i))
    }
}

/// A uniformly sampled, finite time series.
///
/// After [`photon_equivalents`] the values are photon-equivalents per ns, so
/// `sum(values) * dt_ns` is the integrated photon count.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    axis: TimeAxis,
    values: Vec<f64>,
}

impl Trace {
    pub fn new(axis: TimeAxis, values: Vec<f64>) -> Result<Self> {
        if values.len() != axis.n_samples() {
            return Err(invalid(format!(
                "trace has {} values but axis has {} samples",
                values.len(),
                axis.n_samples()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("trace value {i} is not finite")));
        }
        Ok(Self { axis, values })
    }

    pub fn zeros(axis: TimeAxis) -> Self {
        Self {
            axis,
            values: vec![0.0; axis.n_samples()],
        }
    }

    #[inline]
    pub fn axis(&self) -> &TimeAxis {
        &self.axis
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Integrated content, `sum(values) * dt`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.axis.dt_ns()
    }

    pub fn scaled(&self, factor: f64) -> Trace {
        Trace {
            axis: self.axis,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Gaussian single-photon detector response.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorKernel {
    fwhm_ns: f64,
    area: f64,
    dt_ns: f64,
    sigma_ns: f64,
    samples: Vec<f64>,
}

/// FWHM of a Gaussian in units of its standard deviation, `2 sqrt(2 ln 2)`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// Support half-width in standard deviations.
const KERNEL_HALF_WIDTH_SIGMA: f64 = 4.0;

/// Build a Gaussian kernel on the `dt_ns` grid, truncated at ±4σ and
/// renormalized so that `sum(samples) * dt_ns == area`.
pub fn detector_kernel(fwhm_ns: f64, dt_ns: f64, area: f64) -> Result<DetectorKernel> {
    for (name, v) in [("fwhm_ns", fwhm_ns), ("dt_ns", dt_ns), ("area", area)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(invalid(format!("{name} must be positive, got {v}")));
        }
    }
    let sigma_ns = fwhm_ns / FWHM_PER_SIGMA;
    let half = (KERNEL_HALF_WIDTH_SIGMA * sigma_ns / dt_ns).floor() as i64;
    let raw: Vec<f64> = (-half..=half)
        .map(|j| {
            let x = j as f64 * dt_ns / sigma_ns;
            (-0.5 * x * x).exp()
        })
        .collect();
    let norm = raw.iter().sum::<f64>() * dt_ns;
    let samples = raw.into_iter().map(|v| v * area / norm).collect();
    Ok(DetectorKernel {
        fwhm_ns,
        area,
        dt_ns,
        sigma_ns,
        samples,
    })
}

impl DetectorKernel {
    pub fn fwhm_ns(&self) -> f64 {
        self.fwhm_ns
    }

    pub fn sigma_ns(&self) -> f64 {
        self.sigma_ns
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn dt_ns(&self) -> f64 {
        self.dt_ns
    }

    /// Kernel samples centred on the middle element.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn center(&self) -> usize {
        self.samples.len() / 2
    }

    /// Add one pulse centred at the continuous time `arrival_ns` into `out`.
    ///
    /// The Gaussian is evaluated at the sample times of `axis` within ±4σ and
    /// normalized over that full support, so a pulse that lies entirely inside
    /// the axis contributes exactly `area` to the integral. Samples falling
    /// outside the axis are dropped.
    pub fn stamp(&self, axis: &TimeAxis, arrival_ns: f64, out: &mut [f64]) {
        let dt = axis.dt_ns();
        let reach = KERNEL_HALF_WIDTH_SIGMA * self.sigma_ns;
        let pos = (arrival_ns - axis.t0_ns()) / dt;
        let lo = ((arrival_ns - reach - axis.t0_ns()) / dt).ceil() as i64;
        let hi = ((arrival_ns + reach - axis.t0_ns()) / dt).floor() as i64;
        if hi < lo {
            return;
        }
        let inv_sigma = dt / self.sigma_ns;
        let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
        let mut norm = 0.0;
        for j in lo..=hi {
            let x = (j as f64 - pos) * inv_sigma;
            let w = (-0.5 * x * x).exp();
            norm += w;
            weights.push(w);
        }
        let scale = self.area / (norm * dt);
        let n = out.len() as i64;
        for (w, j) in weights.into_iter().zip(lo..=hi) {
            if (0..n).contains(&j) {
                out[j as usize] += w * scale;
            }
        }
    }
}

/// Convert a raw trace into photon-equivalent units.
///
/// Values are divided by the area of the single-photon response; negative
/// samples (ADC noise) are clamped to zero.
pub fn photon_equivalents(raw: &Trace, single_photon_area: f64) -> Result<Trace> {
    if !(single_photon_area > 0.0 && single_photon_area.is_finite()) {
        return Err(invalid(format!(
            "single_photon_area must be positive, got {single_photon_area}"
        )));
    }
    let values = raw
        .values()
        .iter()
        .map(|v| (v / single_photon_area).max(0.0))
        .collect();
    Ok(Trace {
        axis: *raw.axis(),
        values,
    })
}

/// Mean trace with a per-bin 1σ Poisson uncertainty (in rate units).
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyBand {
    pub mean: Trace,
    pub sigma: Vec<f64>,
}

/// Average over `members` with Poisson uncertainty of that average.
///
/// With `c_bin = v_bin * dt` the photon count in a bin and `M` members,
/// `sigma_bin = sqrt(sum_members c_bin) / M / dt`.
pub fn poisson_band(shots: &ShotSet, members: &[usize]) -> Result<UncertaintyBand> {
    if members.is_empty() {
        return Err(invalid("poisson_band needs at least one member"));
    }
    let axis = *shots.axis();
    let n = axis.n_samples();
    let mut sum = vec![0.0; n];
    for &m in members {
        let row = shots.try_row(m)?;
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let m = members.len() as f64;
    let dt = axis.dt_ns();
    let sigma = sum
        .iter()
        .map(|s| (s * dt).max(0.0).sqrt() / m / dt)
        .collect();
    let mean = sum.into_iter().map(|s| s / m).collect();
    Ok(UncertaintyBand {
        mean: Trace { axis, values: mean },
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis(n: usize, dt: f64) -> TimeAxis {
        TimeAxis::new(0.0, dt, n).unwrap()
    }

    #[test]
    fn axis_deserialization_is_validated() {
        let ok: TimeAxis = serde_json::from_str(r#"{"t0_ns":0.0,"dt_ns":0.5,"n_samples":4}"#).unwrap();
        assert_eq!(ok, TimeAxis::new(0.0, 0.5, 4).unwrap());
        assert!(serde_json::from_str::<TimeAxis>(r#"{"t0_ns":0.0,"dt_ns":-0.5,"n_samples":4}"#).is_err());
        assert!(serde_json::from_str::<TimeAxis>(r#"{"t0_ns":0.0,"dt_ns":0.5,"n_samples":1}"#).is_err());
    }

    #[test]
    fn axis_validation() {
        assert!(TimeAxis::new(0.0, 0.0, 10).is_err());
        assert!(TimeAxis::new(0.0, 1.0, 1).is_err());
        let a = TimeAxis::spanning(0.0, 150.0, 0.5).unwrap();
        assert_eq!(a.n_samples(), 300);
        assert_eq!(a.time(4), 2.0);
        assert_eq!(a.end_ns(), 150.0);
    }

    #[test]
    fn trace_rejects_wrong_length_and_nan() {
        assert!(Trace::new(axis(3, 1.0), vec![0.0; 2]).is_err());
        assert!(Trace::new(axis(2, 1.0), vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn kernel_sigma_from_fwhm() {
        let k = detector_kernel(2.5, 0.5, 1.0).unwrap();
        assert!((k.sigma_ns() - 1.0617).abs() < 1e-4);
    }

    #[test]
    fn kernel_normalized_to_area() {
        for (fwhm, dt, area) in [(2.5, 0.5, 1.0), (1.0, 0.1, 1.0), (7.0, 2.0, 3.5), (0.3, 1.0, 1.0)] {
            let k = detector_kernel(fwhm, dt, area).unwrap();
            let total: f64 = k.samples().iter().sum::<f64>() * dt;
            assert!((total - area).abs() <= 1e-9 * area, "{fwhm} {dt} {area}: {total}");
        }
    }

    #[test]
    fn kernel_peak_value() {
        let k = detector_kernel(2.5, 0.5, 3.0).unwrap();
        let peak = k.samples()[k.center()];
        let analytic = 3.0 / (k.sigma_ns() * (2.0 * std::f64::consts::PI).sqrt());
        assert!((peak - 1.127).abs() < 1e-3, "{peak}");
        // truncation at ±4σ removes ~6e-5 of the mass before renormalization
        assert!((peak - analytic).abs() / analytic < 1e-4);
    }

    #[test]
    fn kernel_is_symmetric_and_truncated_at_four_sigma() {
        let k = detector_kernel(2.5, 0.5, 1.0).unwrap();
        let s = k.samples();
        for i in 0..s.len() {
            assert_eq!(s[i], s[s.len() - 1 - i]);
        }
        let half = k.center() as f64 * 0.5;
        assert!(half <= 4.0 * k.sigma_ns());
        assert!(half + 0.5 > 4.0 * k.sigma_ns());
    }

    #[test]
    fn kernel_rejects_non_positive() {
        assert!(detector_kernel(0.0, 0.5, 1.0).is_err());
        assert!(detector_kernel(2.5, -0.5, 1.0).is_err());
        assert!(detector_kernel(2.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn stamp_integrates_to_area_off_grid() {
        let a = TimeAxis::new(-20.0, 0.5, 100).unwrap();
        let k = detector_kernel(2.5, 0.5, 1.0).unwrap();
        for arrival in [0.0, 0.13, 3.77, 10.49] {
            let mut out = vec![0.0; 100];
            k.stamp(&a, arrival, &mut out);
            let total: f64 = out.iter().sum::<f64>() * 0.5;
            assert!((total - 1.0).abs() < 1e-12, "{arrival}: {total}");
        }
    }

    #[test]
    fn photon_equivalents_scales_and_clamps() {
        let a = axis(4, 1.0);
        let z = Trace::zeros(a);
        assert_eq!(photon_equivalents(&z, 2.0).unwrap(), z);
        let raw = Trace::new(a, vec![-0.1, 2.0, 4.0, 0.0]).unwrap();
        let pe = photon_equivalents(&raw, 2.0).unwrap();
        assert_eq!(pe.values(), &[0.0, 1.0, 2.0, 0.0]);
        assert!(photon_equivalents(&raw, 0.0).is_err());
        assert!(photon_equivalents(&raw, -1.0).is_err());
    }

    #[test]
    fn photon_equivalents_of_single_pulse_is_one_photon() {
        let dt = 0.5;
        let area = 37.5;
        let k = detector_kernel(2.5, dt, area).unwrap();
        let a = TimeAxis::new(0.0, dt, 64).unwrap();
        let mut values = vec![0.0; 64];
        let c = k.center();
        for (j, s) in k.samples().iter().enumerate() {
            values[20 + j - c] += s;
        }
        let raw = Trace::new(a, values).unwrap();
        let pe = photon_equivalents(&raw, area).unwrap();
        assert!((pe.integral() - 1.0).abs() < 1e-6);
    }

    fn set(rows: &[Vec<f64>], dt: f64) -> ShotSet {
        let a = axis(rows[0].len(), dt);
        ShotSet::from_rows(a, rows.to_vec()).unwrap()
    }

    #[test]
    fn band_single_member_sqrt_n() {
        // c_bin = 4 counts with dt = 0.5 -> value 8
        let s = set(&[vec![8.0, 0.0]], 0.5);
        let b = poisson_band(&s, &[0]).unwrap();
        assert!((b.sigma[0] * 0.5 - 2.0).abs() < 1e-12);
        assert_eq!(b.sigma[1], 0.0);
    }

    #[test]
    fn band_four_identical_members() {
        let s = set(&vec![vec![4.0, 0.0]; 4], 1.0);
        let b = poisson_band(&s, &[0, 1, 2, 3]).unwrap();
        assert!((b.sigma[0] - 1.0).abs() < 1e-12);
        assert_eq!(b.mean.values(), &[4.0, 0.0]);
    }

    #[test]
    fn band_all_zero_and_empty() {
        let s = set(&vec![vec![0.0; 3]; 2], 1.0);
        let b = poisson_band(&s, &[0, 1]).unwrap();
        assert!(b.sigma.iter().all(|&v| v == 0.0));
        assert!(poisson_band(&s, &[]).is_err());
    }

    #[test]
    fn band_sigma_scales_inverse_sqrt_m() {
        let row = vec![3.0, 7.0, 11.0];
        let one = poisson_band(&set(&[row.clone()], 1.0), &[0]).unwrap();
        let m = 9;
        let many = poisson_band(&set(&vec![row; m], 1.0), &(0..m).collect::<Vec<_>>()).unwrap();
        for (a, b) in one.sigma.iter().zip(&many.sigma) {
            assert!((b * (m as f64).sqrt() - a).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn photon_equivalents_linear(vals in proptest::collection::vec(0.0f64..100.0, 2..20), lambda in 0.01f64..50.0) {
            let a = axis(vals.len(), 0.5);
            let t = Trace::new(a, vals).unwrap();
            let base = photon_equivalents(&t, 3.0).unwrap();
            let scaled = photon_equivalents(&t.scaled(lambda), 3.0).unwrap();
            for (x, y) in base.values().iter().zip(scaled.values()) {
                proptest::prop_assert!((x * lambda - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
