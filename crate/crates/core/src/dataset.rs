//! Shot sets, the binary bundle format and CSV curve export.
//!
//! A bundle is a single file:
//!
//! ```text
//! {"magic":"SHOTSORT1","n_shots":..,"n_samples":..,"t0_ns":..,"dt_ns":..,"has_labels":..,"meta":{..}}\n
//! n_shots * n_samples little-endian f32, row-major
//! n_shots label bytes (only when has_labels)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::trace::{TimeAxis, Trace};

pub const BUNDLE_MAGIC: &str = "SHOTSORT1";

/// Meta key holding the single-photon response area of the raw data.
pub const META_SINGLE_PHOTON_AREA: &str = "single_photon_area";

/// An ordered collection of traces on a shared time axis.
///
/// Ground-truth labels may be attached for evaluation; analysis code never
/// reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotSet {
    axis: TimeAxis,
    n_shots: usize,
    data: Vec<f64>,
    labels: Option<Vec<u8>>,
    meta: BTreeMap<String, String>,
}

impl ShotSet {
    /// Build from a row-major `n_shots x n_samples` matrix.
    pub fn new(axis: TimeAxis, n_shots: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_shots * axis.n_samples() {
            return Err(invalid(format!(
                "matrix has {} values, expected {} x {}",
                data.len(),
                n_shots,
                axis.n_samples()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("trace matrix contains non-finite values"));
        }
        Ok(Self {
            axis,
            n_shots,
            data,
            labels: None,
            meta: BTreeMap::new(),
        })
    }

    pub fn from_rows(axis: TimeAxis, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_shots = rows.len();
        let mut data = Vec::with_capacity(n_shots * axis.n_samples());
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != axis.n_samples() {
                return Err(invalid(format!("row {i} has {} samples", r.len())));
            }
            data.extend(r);
        }
        Self::new(axis, n_shots, data)
    }

    pub fn from_traces(traces: &[Trace]) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| invalid("cannot build a shot set from zero traces"))?;
        let axis = *first.axis();
        if traces.iter().any(|t| *t.axis() != axis) {
            return Err(invalid("traces do not share a time axis"));
        }
        let data = traces.iter().flat_map(|t| t.values().iter().copied()).collect();
        Self::new(axis, traces.len(), data)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.n_shots {
            return Err(invalid(format!(
                "{} labels for {} shots",
                labels.len(),
                self.n_shots
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    #[inline]
    pub fn axis(&self) -> &TimeAxis {
        &self.axis
    }

    #[inline]
    pub fn n_shots(&self) -> usize {
        self.n_shots
    }

    #[inline]
    pub fn n_samples(&self) -> usize {
        self.axis.n_samples()
    }

    /// Raw row `i`. Panics when out of range.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.axis.n_samples();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn try_row(&self, i: usize) -> Result<&[f64]> {
        if i >= self.n_shots {
            return Err(invalid(format!(
                "shot index {i} out of range for {} shots",
                self.n_shots
            )));
        }
        Ok(self.row(i))
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.axis.n_samples())
    }

    pub fn shot(&self, i: usize) -> Trace {
        Trace::new(self.axis, self.row(i).to_vec()).expect("rows are validated on construction")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    /// Copy of the selected shots (with their labels, when present).
    pub fn subset(&self, indices: &[usize]) -> Result<ShotSet> {
        let mut data = Vec::with_capacity(indices.len() * self.n_samples());
        for &i in indices {
            data.extend_from_slice(self.try_row(i)?);
        }
        Ok(ShotSet {
            axis: self.axis,
            n_shots: indices.len(),
            data,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            meta: self.meta.clone(),
        })
    }
}

/// Drop the labels of `set`.
pub fn blind_labels(set: &ShotSet) -> ShotSet {
    ShotSet {
        labels: None,
        ..set.clone()
    }
}

/// Attach `labels` to a copy of `set`.
pub fn unblind_labels(set: &ShotSet, labels: &[u8]) -> Result<ShotSet> {
    blind_labels(set).with_labels(labels.to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    magic: String,
    n_shots: usize,
    n_samples: usize,
    t0_ns: f64,
    dt_ns: f64,
    has_labels: bool,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Encode `set` in the bundle format.
pub fn encode_bundle(set: &ShotSet) -> Result<Vec<u8>> {
    let header = BundleHeader {
        magic: BUNDLE_MAGIC.to_string(),
        n_shots: set.n_shots,
        n_samples: set.n_samples(),
        t0_ns: set.axis.t0_ns(),
        dt_ns: set.axis.dt_ns(),
        has_labels: set.labels.is_some(),
        meta: set.meta.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(set.data.len() * 4 + set.n_shots);
    for v in &set.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(labels) = &set.labels {
        out.extend_from_slice(labels);
    }
    Ok(out)
}

pub fn write_bundle(set: &ShotSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundle(set)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Decode a bundle held in memory. `path` is only used for error context.
pub fn decode_bundle(bytes: &[u8], path: &Path) -> Result<ShotSet> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt("missing header line".into()))?;
    let header: BundleHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| fmt(format!("unreadable header: {e}")))?;
    if header.magic != BUNDLE_MAGIC {
        return Err(fmt(format!(
            "bad magic {:?}, expected {BUNDLE_MAGIC:?}",
            header.magic
        )));
    }
    if header.n_shots == 0 || header.n_samples == 0 {
        return Err(fmt(format!(
            "dimensions must be positive, got {} x {}",
            header.n_shots, header.n_samples
        )));
    }
    let axis = TimeAxis::new(header.t0_ns, header.dt_ns, header.n_samples)
        .map_err(|e| fmt(format!("invalid axis: {e}")))?;
    let label_bytes = if header.has_labels { header.n_shots } else { 0 };
    let n_values = header.n_shots.checked_mul(header.n_samples);
    let expected = n_values
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(label_bytes))
        .ok_or_else(|| fmt("dimensions overflow".into()))?;
    let n_values = n_values.expect("checked above");
    let payload = &bytes[nl + 1..];
    if payload.len() != expected {
        return Err(fmt(format!(
            "payload size mismatch: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload[..n_values * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut set = ShotSet::new(axis, header.n_shots, data).map_err(|e| fmt(e.to_string()))?;
    set.meta = header.meta;
    if header.has_labels {
        set.labels = Some(payload[n_values * 4..].to_vec());
    }
    Ok(set)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<ShotSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_bundle(&bytes, path)
}

/// A named curve for CSV export, optionally with a 1σ band.
#[derive(Clone, Debug)]
pub struct Curve {
    pub name: String,
    pub trace: Trace,
    pub sigma: Option<Vec<f64>>,
}

impl Curve {
    pub fn new(name: impl Into<String>, trace: Trace) -> Self {
        Self {
            name: name.into(),
            trace,
            sigma: None,
        }
    }

    pub fn with_sigma(mut self, sigma: Vec<f64>) -> Self {
        self.sigma = Some(sigma);
        self
    }
}

/// Format with 9 significant digits, `%g` style.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s == "-0" {
            "0".to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

pub fn curves_to_csv(curves: &[Curve]) -> Result<String> {
    let first = curves
        .first()
        .ok_or_else(|| invalid("no curves to export"))?;
    let axis = *first.trace.axis();
    for c in curves {
        if *c.trace.axis() != axis {
            return Err(invalid(format!("curve {:?} has a different time axis", c.name)));
        }
        if let Some(s) = &c.sigma {
            if s.len() != axis.n_samples() {
                return Err(invalid(format!("curve {:?} sigma length mismatch", c.name)));
            }
        }
    }
    let mut out = String::from("time_ns");
    for c in curves {
        out.push(',');
        out.push_str(&c.name);
        if c.sigma.is_some() {
            let _ = write!(out, ",{}_sigma", c.name);
        }
    }
    out.push('\n');
    for i in 0..axis.n_samples() {
        out.push_str(&fmt_sig9(axis.time(i)));
        for c in curves {
            out.push(',');
            out.push_str(&fmt_sig9(c.trace.values()[i]));
            if let Some(s) = &c.sigma {
                out.push(',');
                out.push_str(&fmt_sig9(s[i]));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Write curves as CSV: `time_ns` followed by `value[,sigma]` per curve.
pub fn export_curves(curves: &[Curve], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv = curves_to_csv(curves)?;
    fs::write(path, csv).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShotSet {
        let axis = TimeAxis::new(0.0, 0.5, 4).unwrap();
        ShotSet::from_rows(axis, vec![vec![0.0, 1.5, 2.25, 3.0], vec![4.0, 0.125, 0.0, 9.5]])
            .unwrap()
            .with_meta("source", "unit")
    }

    #[test]
    fn bundle_size_arithmetic() {
        let s = small();
        let plain = encode_bundle(&s).unwrap();
        let header_len = plain.iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(plain.len(), header_len + 32);
        let labeled = encode_bundle(&s.clone().with_labels(vec![0, 1]).unwrap()).unwrap();
        let header_len = labeled.iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(labeled.len(), header_len + 32 + 2);
    }

    #[test]
    fn header_starts_with_magic_and_sorted_meta() {
        let s = small().with_meta("b", "2").with_meta("a", "1");
        let bytes = encode_bundle(&s).unwrap();
        let text = std::str::from_utf8(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).unwrap();
        assert!(text.starts_with("{\"magic\":\"SHOTSORT1\""));
        assert!(text.contains("\"meta\":{\"a\":\"1\",\"b\":\"2\",\"source\":\"unit\"}"));
        assert_eq!(bytes, encode_bundle(&s).unwrap());
    }

    #[test]
    fn roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bundle");
        let s = small().with_labels(vec![1, 0]).unwrap();
        write_bundle(&s, &p).unwrap();
        assert_eq!(read_bundle(&p).unwrap(), s);
    }

    #[test]
    fn unwritable_path_names_path() {
        let err = write_bundle(&small(), "/nonexistent-dir/sub/x.bundle").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent-dir/sub/x.bundle"));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let axis = TimeAxis::new(0.0, 1.0, 3).unwrap();
        let s = ShotSet::new(axis, 10, vec![1.0; 30]).unwrap();
        let mut bytes = encode_bundle(&s).unwrap();
        bytes.truncate(bytes.len() - 12);
        let err = decode_bundle(&bytes, Path::new("t.bundle")).unwrap_err();
        match err {
            Error::Format { reason, .. } => {
                assert!(reason.contains("expected 120"), "{reason}");
                assert!(reason.contains("found 108"), "{reason}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let bytes = encode_bundle(&small()).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("SHOTSORT1", "SHOTSORTX", 1);
        let mut patched = bytes.clone();
        patched[..text.find('\n').unwrap()].copy_from_slice(&text.as_bytes()[..text.find('\n').unwrap()]);
        let err = decode_bundle(&patched, Path::new("m.bundle")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn blind_and_unblind() {
        let s = small().with_labels(vec![1, 0]).unwrap();
        let b = blind_labels(&s);
        assert!(b.labels().is_none());
        assert_eq!(unblind_labels(&b, &[1, 0]).unwrap(), s);
        assert!(unblind_labels(&b, &[1]).is_err());
    }

    #[test]
    fn csv_shapes() {
        let axis = TimeAxis::new(0.0, 1.0, 3).unwrap();
        let t = Trace::new(axis, vec![1.0, 2.0, 3.0]).unwrap();
        let one = curves_to_csv(&[Curve::new("a", t.clone())]).unwrap();
        assert_eq!(one.lines().count(), 4);
        assert_eq!(one.lines().next().unwrap(), "time_ns,a");

        let two = curves_to_csv(&[
            Curve::new("a", t.clone()).with_sigma(vec![0.1; 3]),
            Curve::new("b", t.clone()),
        ])
        .unwrap();
        for line in two.lines() {
            assert_eq!(line.split(',').count(), 1 + 2 + 1);
        }

        let other = Trace::new(TimeAxis::new(1.0, 1.0, 3).unwrap(), vec![0.0; 3]).unwrap();
        assert!(curves_to_csv(&[Curve::new("a", t), Curve::new("b", other)]).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(3.5), "3.5");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(123456789.4), "123456789");
        assert_eq!(fmt_sig9(-2.0), "-2");
        assert_eq!(fmt_sig9(1.5e-9), "1.50000000e-9");
    }
}
