//! Singular value scaling: `W -> U f(Sigma) V^T` for a chosen `f`, plus the
//! matching rescale of a layer's additive bias.
//!
//! The default `f` is the square root. It maps non-negative values to
//! non-negative values, lifts singular values below one, shrinks those above
//! one, and keeps their order, so a spectrum with condition number `k` comes
//! out with condition number `sqrt(k)` while `U` and `V` stay untouched.
//!
//! For `y = W x + b` the bias can be folded into the input as
//! `y = W (x + W^+ b)`, whose `i`-th coordinate carries `|b| / sigma_i`. Scaling
//! the bias as `b / sqrt(|b|)` alongside `sigma_i -> sqrt(sigma_i)` gives
//! `|b_scaled| / sqrt(sigma_i) = sqrt(|b| / sigma_i)`. Other scalers use the
//! same rule with their own `f`: `b -> (f(|b|) / |b|) b`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{norm2, Matrix};
use crate::svd::{reconstruct, svd, SvdError, SvdFactors, DEFAULT_RANK_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("singular value {value} at index {index} is negative or non-finite")]
    InvalidSigma { index: usize, value: f64 },
    #[error("AbsLog undefined at zero (singular value index {index})")]
    AbsLogAtZero { index: usize },
    #[error("zero spectral norm")]
    ZeroSpectralNorm,
    #[error("bias contains non-finite values")]
    NonFiniteBias,
    #[error("bias of length {bias} does not match {rows} output rows")]
    BiasLength { bias: usize, rows: usize },
    #[error("ratio identity precondition violated: {0}")]
    RatioPrecondition(String),
    #[error(transparent)]
    Svd(#[from] SvdError),
}

/// The family of singular value maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerKind {
    /// `sqrt(s)`, the default.
    Sqrt,
    /// `ln(s + 1)`.
    Log1p,
    /// `|ln s|`; not monotone, undefined at zero.
    AbsLog,
    /// `s^2`, widens gaps.
    Square,
    /// Every retained singular value set to one (orthogonal weights).
    Normalize,
    /// `s / s_max`.
    #[serde(rename = "specnorm")]
    SpectralNormalize,
    Identity,
}

impl ScalerKind {
    pub const ALL: [ScalerKind; 7] = [
        ScalerKind::Sqrt,
        ScalerKind::Log1p,
        ScalerKind::AbsLog,
        ScalerKind::Square,
        ScalerKind::Normalize,
        ScalerKind::SpectralNormalize,
        ScalerKind::Identity,
    ];

    /// Command-line and config label.
    pub fn label(self) -> &'static str {
        match self {
            ScalerKind::Sqrt => "sqrt",
            ScalerKind::Log1p => "log1p",
            ScalerKind::AbsLog => "abslog",
            ScalerKind::Square => "square",
            ScalerKind::Normalize => "normalize",
            ScalerKind::SpectralNormalize => "specnorm",
            ScalerKind::Identity => "identity",
        }
    }

    /// Whether `f` is non-decreasing on `[0, inf)`, i.e. never reorders a spectrum.
    pub fn preserves_order(self) -> bool {
        !matches!(self, ScalerKind::AbsLog)
    }
}

impl fmt::Display for ScalerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScalerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ScalerKind::ALL.into_iter().find(|k| k.label().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let labels: Vec<_> = ScalerKind::ALL.iter().map(|k| k.label()).collect();
            format!("unknown scaler {s:?}, expected one of {}", labels.join("|"))
        })
    }
}

/// Applies `kind` elementwise with the default rank tolerance.
pub fn apply_scaler(sigma: &[f64], kind: ScalerKind) -> Result<Vec<f64>, ScaleError> {
    apply_scaler_with_tol(sigma, kind, DEFAULT_RANK_TOL)
}

/// Applies `kind` elementwise without re-sorting.
///
/// `tol` is relative to the largest entry: `Normalize` sends entries at or
/// below `tol * s_max` to zero instead of one, and `AbsLog` rejects them.
pub fn apply_scaler_with_tol(sigma: &[f64], kind: ScalerKind, tol: f64) -> Result<Vec<f64>, ScaleError> {
    if let Some((index, &value)) = sigma.iter().enumerate().find(|(_, s)| !s.is_finite() || **s < 0.0) {
        return Err(ScaleError::InvalidSigma { index, value });
    }
    let max = sigma.iter().fold(0.0_f64, |m, &s| m.max(s));
    let cutoff = tol * max;
    let out = match kind {
        ScalerKind::Sqrt => sigma.iter().map(|s| s.sqrt()).collect(),
        ScalerKind::Log1p => sigma.iter().map(|s| s.ln_1p()).collect(),
        ScalerKind::AbsLog => {
            if let Some(index) = sigma.iter().position(|&s| s == 0.0 || s <= cutoff) {
                return Err(ScaleError::AbsLogAtZero { index });
            }
            sigma.iter().map(|s| s.ln().abs()).collect()
        }
        ScalerKind::Square => sigma.iter().map(|s| s * s).collect(),
        ScalerKind::Normalize => sigma.iter().map(|&s| if s > cutoff && s > 0.0 { 1.0 } else { 0.0 }).collect(),
        ScalerKind::SpectralNormalize => {
            if max == 0.0 {
                return Err(ScaleError::ZeroSpectralNorm);
            }
            sigma.iter().map(|s| s / max).collect()
        }
        ScalerKind::Identity => sigma.to_vec(),
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationKind {
    /// Distinct inputs mapped to equal outputs.
    Tie,
    /// Output order reversed.
    Flip,
}

/// Adjacent pair `(index, index + 1)` whose strict order was lost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderViolation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for OrderViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::Tie => "tie",
            ViolationKind::Flip => "order flip",
        };
        write!(f, "singular value {what} at positions {}/{}", self.index, self.index + 1)
    }
}

/// Compares a strictly ordered input spectrum with its image.
pub fn order_violations(before: &[f64], after: &[f64]) -> Vec<OrderViolation> {
    assert_eq!(before.len(), after.len());
    let mut out = Vec::new();
    for i in 0..before.len().saturating_sub(1) {
        if before[i] <= before[i + 1] {
            continue;
        }
        if after[i] < after[i + 1] {
            out.push(OrderViolation { index: i, kind: ViolationKind::Flip });
        } else if after[i] == after[i + 1] {
            out.push(OrderViolation { index: i, kind: ViolationKind::Tie });
        }
    }
    out
}

/// Factors with the same bases and scaled singular values.
pub fn scale_factors(f: &SvdFactors, kind: ScalerKind, tol: f64) -> Result<SvdFactors, ScaleError> {
    Ok(f.with_sigma(apply_scaler_with_tol(f.sigma(), kind, tol)?)?)
}

/// `U f(Sigma) V^T` from the SVD of `w`.
pub fn scale_weight(w: &Matrix, kind: ScalerKind) -> Result<Matrix, ScaleError> {
    if kind == ScalerKind::Identity {
        // f = id leaves W unchanged; skip the rounding of a round trip
        svd(w)?;
        return Ok(w.clone());
    }
    Ok(reconstruct(&scale_factors(&svd(w)?, kind, DEFAULT_RANK_TOL)?))
}

/// Rescales a bias so its norm maps through the same `f` as the singular
/// values while its direction is kept. A zero bias is returned unchanged.
pub fn scale_bias(b: &[f64], kind: ScalerKind) -> Result<Vec<f64>, ScaleError> {
    if b.iter().any(|x| !x.is_finite()) {
        return Err(ScaleError::NonFiniteBias);
    }
    let norm = norm2(b);
    if norm == 0.0 {
        return Ok(b.to_vec());
    }
    if kind == ScalerKind::Identity {
        return Ok(b.to_vec());
    }
    let target = apply_scaler_with_tol(&[norm], kind, 0.0)?[0];
    let factor = target / norm;
    Ok(b.iter().map(|x| x * factor).collect())
}

/// Residuals `| |b_s| / sqrt(s_i) - sqrt(|b| / s_i) |` for the square-root
/// scaler, one per singular value. Each should be at rounding level.
pub fn verify_ratio_identity(b: &[f64], sigma: &[f64]) -> Result<Vec<f64>, ScaleError> {
    let norm = norm2(b);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(ScaleError::RatioPrecondition("bias norm must be positive".into()));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(ScaleError::RatioPrecondition(format!("singular value {s} is not positive")));
    }
    let scaled_norm = norm2(&scale_bias(b, ScalerKind::Sqrt)?);
    let scaled_sigma = apply_scaler(sigma, ScalerKind::Sqrt)?;
    Ok(sigma.iter().zip(&scaled_sigma).map(|(s, ss)| (scaled_norm / ss - (norm / s).sqrt()).abs()).collect())
}

/// A refined layer: weight, optional bias, and both spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledPair {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
    pub sigma_before: Vec<f64>,
    pub sigma_after: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Scales a weight matrix and, if given, its bias.
pub fn scale_layer(w: &Matrix, bias: Option<&[f64]>, kind: ScalerKind, tol: f64) -> Result<ScaledPair, ScaleError> {
    if let Some(b) = bias {
        if b.len() != w.rows() {
            return Err(ScaleError::BiasLength { bias: b.len(), rows: w.rows() });
        }
    }
    let factors = svd(w)?;
    let scaled = scale_factors(&factors, kind, tol)?;
    let weight = if kind == ScalerKind::Identity { w.clone() } else { reconstruct(&scaled) };
    let warnings = order_violations(factors.sigma(), scaled.sigma()).iter().map(|v| format!("{kind}: {v}")).collect();
    let bias = bias.map(|b| scale_bias(b, kind)).transpose()?;
    Ok(ScaledPair {
        weight,
        bias,
        sigma_before: factors.sigma().to_vec(),
        sigma_after: scaled.sigma().to_vec(),
        warnings,
    })
}
