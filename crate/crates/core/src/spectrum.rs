//! Singular value diagnostics: extreme values, condition numbers and
//! log-spaced histograms per layer, with JSON and CSV export.
//!
//! Infinite quantities (condition number and log gap of a rank-deficient
//! matrix) are written as the JSON string `"inf"` rather than a number.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::filter::NameFilter;
use crate::svd::{svd, SvdError};
use crate::tensor_store::{Checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("empty singular value vector")]
    Empty,
    #[error("singular value {value} at index {index} is negative or non-finite")]
    InvalidSigma { index: usize, value: f64 },
    #[error("invalid histogram: {0}")]
    Histogram(String),
    #[error("invalid layer pattern: {0}")]
    Pattern(#[from] glob::PatternError),
    #[error("layer {layer:?}: shape {before:?} before but {after:?} after")]
    ShapeMismatch { layer: String, before: Vec<usize>, after: Vec<usize> },
    #[error("layer {layer:?}: {source}")]
    Svd { layer: String, source: SvdError },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// A non-negative quantity that may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    Infinite,
}

impl Extended {
    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::Infinite)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::Infinite => None,
        }
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Finite(v) => write!(f, "{v}"),
            Extended::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Extended {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Extended::Finite(v) => s.serialize_f64(*v),
            Extended::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Extended {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Extended::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(Extended::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub condition: Extended,
    pub log10_gap: Extended,
    pub count: usize,
}

/// Summary statistics of a spectrum. Ordering is not required, so scaled
/// spectra that lost their order (`AbsLog`) are summarized correctly.
pub fn compute_stats(sigma: &[f64]) -> Result<SpectrumStats, ReportError> {
    if sigma.is_empty() {
        return Err(ReportError::Empty);
    }
    if let Some((index, &value)) = sigma.iter().enumerate().find(|(_, s)| !s.is_finite() || **s < 0.0) {
        return Err(ReportError::InvalidSigma { index, value });
    }
    let sigma_max = sigma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sigma_min = sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let (condition, log10_gap) = if sigma_min == 0.0 {
        (Extended::Infinite, Extended::Infinite)
    } else {
        let c = sigma_max / sigma_min;
        (Extended::Finite(c), Extended::Finite(c.log10()))
    };
    Ok(SpectrumStats { sigma_max, sigma_min, condition, log10_gap, count: sigma.len() })
}

/// Bin layout in log10 space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: 64, lo: -6.0, hi: 3.0 }
    }
}

impl HistogramSpec {
    fn validate(&self) -> Result<(), ReportError> {
        if self.bins == 0 {
            return Err(ReportError::Histogram("bins must be at least 1".into()));
        }
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(ReportError::Histogram(format!(
                "range [{}, {}] must be finite with lo < hi",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// log10 edges `[lo, hi)` of bin `i`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.bins as f64;
        (self.lo + w * i as f64, if i + 1 == self.bins { self.hi } else { self.lo + w * (i + 1) as f64 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    /// Values below `lo`, including exact zeros.
    pub underflow: usize,
    pub overflow: usize,
    pub total: usize,
}

/// Bins `log10(sigma)` into equal-width bins over `[lo, hi]`. Bins are
/// left-closed and right-open except the last, which also takes `hi`.
pub fn histogram(sigma: &[f64], spec: HistogramSpec) -> Result<Histogram, ReportError> {
    spec.validate()?;
    let width = (spec.hi - spec.lo) / spec.bins as f64;
    let mut h = Histogram { counts: vec![0; spec.bins], underflow: 0, overflow: 0, total: sigma.len() };
    for (index, &s) in sigma.iter().enumerate() {
        if !s.is_finite() || s < 0.0 {
            return Err(ReportError::InvalidSigma { index, value: s });
        }
        if s == 0.0 {
            h.underflow += 1;
            continue;
        }
        let x = s.log10();
        if x < spec.lo {
            h.underflow += 1;
        } else if x > spec.hi {
            h.overflow += 1;
        } else {
            let bin = (((x - spec.lo) / width).floor() as usize).min(spec.bins - 1);
            h.counts[bin] += 1;
        }
    }
    Ok(h)
}

/// Spectra of one weight tensor, optionally before and after refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_name: String,
    pub shape: Vec<usize>,
    pub before: SpectrumStats,
    pub after: Option<SpectrumStats>,
    pub histogram_spec: HistogramSpec,
    pub histogram_before: Histogram,
    pub histogram_after: Option<Histogram>,
    pub warnings: Vec<String>,
}

impl LayerReport {
    pub fn new(
        layer_name: impl Into<String>,
        shape: Vec<usize>,
        sigma_before: &[f64],
        sigma_after: Option<&[f64]>,
        spec: HistogramSpec,
        warnings: Vec<String>,
    ) -> Result<Self, ReportError> {
        Ok(Self {
            layer_name: layer_name.into(),
            shape,
            before: compute_stats(sigma_before)?,
            after: sigma_after.map(compute_stats).transpose()?,
            histogram_spec: spec,
            histogram_before: histogram(sigma_before, spec)?,
            histogram_after: sigma_after.map(|s| histogram(s, spec)).transpose()?,
            warnings,
        })
    }
}

fn layer_sigma(ckpt: &Checkpoint, name: &str) -> Result<Vec<f64>, ReportError> {
    let m = ckpt.get(name).expect("name taken from checkpoint").as_matrix()?;
    let f = svd(&m).map_err(|source| ReportError::Svd { layer: name.to_string(), source })?;
    Ok(f.sigma().to_vec())
}

fn matrix_names(ckpt: &Checkpoint, filter: &NameFilter) -> Vec<String> {
    ckpt.tensors().filter(|t| t.rank() >= 2 && filter.matches(t.name())).map(|t| t.name().to_string()).collect()
}

/// Reports for every matrix-like tensor of `ckpt` selected by `filter`.
pub fn inspect_checkpoint(
    ckpt: &Checkpoint,
    filter: &NameFilter,
    spec: HistogramSpec,
) -> Result<Vec<LayerReport>, ReportError> {
    spec.validate()?;
    matrix_names(ckpt, filter)
        .par_iter()
        .map(|name| {
            let sigma = layer_sigma(ckpt, name)?;
            let shape = ckpt.get(name).unwrap().shape().to_vec();
            LayerReport::new(name.clone(), shape, &sigma, None, spec, Vec::new())
        })
        .collect()
}

/// Before/after reports for matrix-like tensors present in both checkpoints,
/// sorted by name. Same-named tensors must share a shape.
pub fn compare_checkpoints(
    before: &Checkpoint,
    after: &Checkpoint,
    filter: &NameFilter,
    spec: HistogramSpec,
) -> Result<Vec<LayerReport>, ReportError> {
    spec.validate()?;
    let names: Vec<String> = matrix_names(before, filter).into_iter().filter(|n| after.get(n).is_some()).collect();
    for name in &names {
        let (b, a) = (before.get(name).unwrap(), after.get(name).unwrap());
        if b.shape() != a.shape() {
            return Err(ReportError::ShapeMismatch {
                layer: name.clone(),
                before: b.shape().to_vec(),
                after: a.shape().to_vec(),
            });
        }
    }
    names
        .par_iter()
        .map(|name| {
            let sb = layer_sigma(before, name)?;
            let sa = layer_sigma(after, name)?;
            let shape = before.get(name).unwrap().shape().to_vec();
            LayerReport::new(name.clone(), shape, &sb, Some(&sa), spec, Vec::new())
        })
        .collect()
}

pub const POOLED_LAYER_NAME: &str = "*pooled*";

fn pool_stats(stats: impl Iterator<Item = SpectrumStats>) -> Option<SpectrumStats> {
    let mut out: Option<(f64, f64, usize)> = None;
    for s in stats {
        let (mx, mn, c) = out.unwrap_or((f64::NEG_INFINITY, f64::INFINITY, 0));
        out = Some((mx.max(s.sigma_max), mn.min(s.sigma_min), c + s.count));
    }
    let (sigma_max, sigma_min, count) = out?;
    let (condition, log10_gap) = if sigma_min == 0.0 {
        (Extended::Infinite, Extended::Infinite)
    } else {
        let c = sigma_max / sigma_min;
        (Extended::Finite(c), Extended::Finite(c.log10()))
    };
    Some(SpectrumStats { sigma_max, sigma_min, condition, log10_gap, count })
}

fn pool_hist(hists: impl Iterator<Item = Histogram>, bins: usize) -> Histogram {
    let mut h = Histogram { counts: vec![0; bins], underflow: 0, overflow: 0, total: 0 };
    for x in hists {
        for (a, b) in h.counts.iter_mut().zip(&x.counts) {
            *a += b;
        }
        h.underflow += x.underflow;
        h.overflow += x.overflow;
        h.total += x.total;
    }
    h
}

/// Merges layer reports that share one histogram layout into a single
/// report over all singular values. `None` for an empty list or mixed layouts.
pub fn pool_reports(reports: &[LayerReport]) -> Option<LayerReport> {
    let spec = reports.first()?.histogram_spec;
    if reports.iter().any(|r| r.histogram_spec != spec) {
        return None;
    }
    let all_after = reports.iter().all(|r| r.after.is_some());
    Some(LayerReport {
        layer_name: POOLED_LAYER_NAME.to_string(),
        shape: Vec::new(),
        before: pool_stats(reports.iter().map(|r| r.before))?,
        after: if all_after { pool_stats(reports.iter().filter_map(|r| r.after)) } else { None },
        histogram_spec: spec,
        histogram_before: pool_hist(reports.iter().map(|r| r.histogram_before.clone()), spec.bins),
        histogram_after: all_after
            .then(|| pool_hist(reports.iter().filter_map(|r| r.histogram_after.clone()), spec.bins)),
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// CSV columns, in order. Each layer contributes one `summary` row, then
/// `underflow`, one `bin` row per histogram bin, and `overflow`. Stats
/// columns are filled on summary rows only; count columns on the others.
pub const CSV_COLUMNS: [&str; 18] = [
    "layer",
    "record",
    "bin",
    "log10_lo",
    "log10_hi",
    "count_before",
    "count_after",
    "shape",
    "sigma_max_before",
    "sigma_min_before",
    "condition_before",
    "log10_gap_before",
    "n_before",
    "sigma_max_after",
    "sigma_min_after",
    "condition_after",
    "log10_gap_after",
    "n_after",
];

/// Serializes reports. JSON is an array of objects with the fields of
/// [`LayerReport`] in declaration order.
pub fn export_report(reports: &[LayerReport], format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(reports).expect("reports serialize");
            out.push(b'\n');
            out
        }
        ReportFormat::Csv => export_csv(reports),
    }
}

fn stats_cells(s: Option<&SpectrumStats>) -> [String; 5] {
    match s {
        Some(s) => [
            s.sigma_max.to_string(),
            s.sigma_min.to_string(),
            s.condition.to_string(),
            s.log10_gap.to_string(),
            s.count.to_string(),
        ],
        None => Default::default(),
    }
}

fn export_csv(reports: &[LayerReport]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in reports {
        let shape = r.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let mut row: Vec<String> = vec![r.layer_name.clone(), "summary".into()];
        row.extend(std::iter::repeat_n(String::new(), 5));
        row.push(shape);
        row.extend(stats_cells(Some(&r.before)));
        row.extend(stats_cells(r.after.as_ref()));
        w.write_record(&row).expect("in-memory write");

        let spec = r.histogram_spec;
        let after = r.histogram_after.as_ref();
        let count_row = |record: &str, bin: String, lo: String, hi: String, b: usize, a: Option<usize>| {
            let mut row = vec![
                r.layer_name.clone(),
                record.to_string(),
                bin,
                lo,
                hi,
                b.to_string(),
                a.map(|a| a.to_string()).unwrap_or_default(),
            ];
            row.extend(std::iter::repeat_n(String::new(), CSV_COLUMNS.len() - row.len()));
            row
        };
        w.write_record(count_row(
            "underflow",
            String::new(),
            String::new(),
            spec.lo.to_string(),
            r.histogram_before.underflow,
            after.map(|h| h.underflow),
        ))
        .expect("in-memory write");
        for (i, &c) in r.histogram_before.counts.iter().enumerate() {
            let (lo, hi) = spec.edges(i);
            w.write_record(count_row(
                "bin",
                i.to_string(),
                lo.to_string(),
                hi.to_string(),
                c,
                after.map(|h| h.counts[i]),
            ))
            .expect("in-memory write");
        }
        w.write_record(count_row(
            "overflow",
            String::new(),
            spec.hi.to_string(),
            String::new(),
            r.histogram_before.overflow,
            after.map(|h| h.overflow),
        ))
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}
