//! Checkpoint-level refinement: choose weight tensors, pair them with their
//! biases, scale each layer and reassemble the checkpoint.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::filter::NameFilter;
use crate::scaling::{scale_layer, ScaleError, ScalerKind};
use crate::spectrum::{export_report, HistogramSpec, LayerReport, ReportError, ReportFormat};
use crate::svd::DEFAULT_RANK_TOL;
use crate::tensor_store::{Checkpoint, CheckpointError, Tensor};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid pattern: {0}")]
    Pattern(#[from] glob::PatternError),
    #[error("nothing to refine: no weight tensor matches the selection")]
    NothingToRefine,
    #[error("layer {layer:?}: {source}")]
    Layer { layer: String, source: ScaleError },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub scaler: ScalerKind,
    /// Rescale paired biases along with their weights.
    pub include_bias: bool,
    /// Glob patterns over tensor names; empty selects every tensor.
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    /// Tensors of lower rank are passed through untouched.
    pub min_rank_dims: usize,
    pub sigma_zero_tol: f64,
    pub report_path: Option<PathBuf>,
    pub histogram: HistogramSpec,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            scaler: ScalerKind::Sqrt,
            include_bias: true,
            include: Vec::new(),
            exclude: Vec::new(),
            min_rank_dims: 2,
            sigma_zero_tol: DEFAULT_RANK_TOL,
            report_path: None,
            histogram: HistogramSpec::default(),
        }
    }
}

impl RefineConfig {
    pub fn with_scaler(scaler: ScalerKind) -> Self {
        Self { scaler, ..Self::default() }
    }

    fn filter(&self) -> Result<NameFilter, RefineError> {
        if self.min_rank_dims < 2 {
            return Err(RefineError::Config(format!("min_rank_dims must be at least 2, got {}", self.min_rank_dims)));
        }
        if !(self.sigma_zero_tol >= 0.0) {
            return Err(RefineError::Config("sigma_zero_tol must be non-negative".into()));
        }
        Ok(NameFilter::new(&self.include, &self.exclude)?)
    }
}

/// A weight tensor and the bias it was paired with, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPair {
    pub weight: String,
    pub bias: Option<String>,
    pub warnings: Vec<String>,
}

/// Pairs every rank >= 2 tensor with a bias: `<prefix>.weight` takes
/// `<prefix>.bias` when that tensor is rank 1 with one entry per output row.
/// A mismatched bias is left unpaired with a warning. Sorted by weight name.
pub fn pair_weight_bias(ckpt: &Checkpoint) -> Vec<LayerPair> {
    ckpt.tensors()
        .filter(|t| t.rank() >= 2)
        .map(|w| {
            let mut pair = LayerPair { weight: w.name().to_string(), bias: None, warnings: Vec::new() };
            let Some(prefix) = w.name().strip_suffix(".weight") else {
                return pair;
            };
            let bias_name = format!("{prefix}.bias");
            if let Some(b) = ckpt.get(&bias_name) {
                if b.rank() == 1 && b.shape()[0] == w.shape()[0] {
                    pair.bias = Some(bias_name);
                } else {
                    pair.warnings.push(format!(
                        "bias {bias_name:?} with shape {:?} does not match {} output rows; left unpaired",
                        b.shape(),
                        w.shape()[0]
                    ));
                }
            }
            pair
        })
        .collect()
}

/// Output of [`refine_checkpoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub checkpoint: Checkpoint,
    pub reports: Vec<LayerReport>,
}

struct LayerOut {
    weight: Tensor,
    bias: Option<Tensor>,
    report: LayerReport,
}

/// Applies the configured scaler to every selected weight (and paired bias).
/// Unselected tensors are carried over byte for byte; refined tensors keep
/// their shape and dtype.
pub fn refine_checkpoint(ckpt: &Checkpoint, cfg: &RefineConfig) -> Result<Refined, RefineError> {
    let filter = cfg.filter()?;
    let selected: Vec<LayerPair> = pair_weight_bias(ckpt)
        .into_iter()
        .filter(|p| {
            let t = ckpt.get(&p.weight).unwrap();
            t.rank() >= cfg.min_rank_dims && filter.matches(&p.weight)
        })
        .collect();
    if selected.is_empty() {
        return Err(RefineError::NothingToRefine);
    }

    let layers: Vec<LayerOut> =
        selected.par_iter().map(|pair| refine_layer(ckpt, pair, cfg, &filter)).collect::<Result<_, _>>()?;

    let mut out = ckpt.clone();
    let mut reports = Vec::with_capacity(layers.len());
    for layer in layers {
        out.replace(layer.weight);
        if let Some(b) = layer.bias {
            out.replace(b);
        }
        reports.push(layer.report);
    }
    Ok(Refined { checkpoint: out, reports })
}

fn refine_layer(
    ckpt: &Checkpoint,
    pair: &LayerPair,
    cfg: &RefineConfig,
    filter: &NameFilter,
) -> Result<LayerOut, RefineError> {
    let wt = ckpt.get(&pair.weight).unwrap();
    let w = wt.as_matrix()?;
    let bias_t =
        pair.bias.as_deref().filter(|b| cfg.include_bias && !filter.is_excluded(b)).map(|b| ckpt.get(b).unwrap());
    let bias_vals = bias_t.map(Tensor::to_f64);

    let scaled = scale_layer(&w, bias_vals.as_deref(), cfg.scaler, cfg.sigma_zero_tol)
        .map_err(|source| RefineError::Layer { layer: pair.weight.clone(), source })?;

    let weight = wt.with_values(scaled.weight.as_slice())?;
    let bias = match (bias_t, &scaled.bias) {
        (Some(t), Some(v)) => Some(t.with_values(v)?),
        _ => None,
    };
    let mut warnings = pair.warnings.clone();
    warnings.extend(scaled.warnings);
    let report = LayerReport::new(
        pair.weight.clone(),
        wt.shape().to_vec(),
        &scaled.sigma_before,
        Some(&scaled.sigma_after),
        cfg.histogram,
        warnings,
    )?;
    Ok(LayerOut { weight, bias, report })
}

/// Report format implied by a path: `.csv` means CSV, anything else JSON.
pub fn format_for_path(path: &Path) -> ReportFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
        _ => ReportFormat::Json,
    }
}

/// Reads `input`, refines it, writes `output` and, if configured, the report.
pub fn refine_file(input: &Path, output: &Path, cfg: &RefineConfig) -> Result<Vec<LayerReport>, RefineError> {
    let bytes = std::fs::read(input).map_err(|source| RefineError::Io { path: input.into(), source })?;
    let ckpt = crate::tensor_store::read_checkpoint(&bytes)?;
    let refined = refine_checkpoint(&ckpt, cfg)?;
    std::fs::write(output, crate::tensor_store::write_checkpoint(&refined.checkpoint))
        .map_err(|source| RefineError::Io { path: output.into(), source })?;
    if let Some(path) = &cfg.report_path {
        std::fs::write(path, export_report(&refined.reports, format_for_path(path)))
            .map_err(|source| RefineError::Io { path: path.clone(), source })?;
    }
    Ok(refined.reports)
}
