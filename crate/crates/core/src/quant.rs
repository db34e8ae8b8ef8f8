//! Uniform b-bit fake quantization and the straight-through estimator.
//!
//! `q(v) = s · round_half_even(clip(v / s, −Q_N, Q_P))`. In the backward pass
//! the gradient passes through unchanged where `−Q_N ≤ v/s ≤ Q_P` (inclusive)
//! and is zeroed elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit-widths at or above this are treated as "quantization disabled": the
/// quantizer is the identity and the STE passes every gradient.
pub const PASSTHROUGH_BITS: u32 = 32;

/// Lower bound applied to calibrated scales.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    bits: u32,
    signed: bool,
    q_n: u64,
    q_p: u64,
    scale: Option<f64>,
}

impl QuantConfig {
    /// Builds an uncalibrated config with the level counts for `bits`.
    ///
    /// Unsigned: `Q_N = 0`, `Q_P = 2^b − 1`. Signed: `Q_N = 2^(b−1)`,
    /// `Q_P = 2^(b−1) − 1`. Signed 1-bit is rejected since it has no positive
    /// level.
    pub fn new(bits: u32, signed: bool) -> Result<Self> {
        if bits == 0 {
            return Err(Error::Config("bit-width must be at least 1".into()));
        }
        if signed && bits == 1 {
            return Err(Error::Config(
                "signed 1-bit quantization has no positive level (Q_P = 0)".into(),
            ));
        }
        let (q_n, q_p) = if bits >= PASSTHROUGH_BITS {
            (0, 0)
        } else if signed {
            (1u64 << (bits - 1), (1u64 << (bits - 1)) - 1)
        } else {
            (0, (1u64 << bits) - 1)
        };
        Ok(Self {
            bits,
            signed,
            q_n,
            q_p,
            scale: None,
        })
    }

    pub fn passthrough() -> Self {
        Self {
            bits: PASSTHROUGH_BITS,
            signed: true,
            q_n: 0,
            q_p: 0,
            scale: Some(1.0),
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn q_n(&self) -> u64 {
        self.q_n
    }

    pub fn q_p(&self) -> u64 {
        self.q_p
    }

    pub fn scale(&self) -> Option<f64> {
        self.scale
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits >= PASSTHROUGH_BITS
    }

    pub fn is_calibrated(&self) -> bool {
        self.scale.is_some()
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Config(format!(
                "scale must be positive, got {scale}"
            )));
        }
        self.scale = Some(scale);
        Ok(self)
    }

    fn calibrated_scale(&self) -> Result<f64> {
        self.scale.ok_or_else(|| {
            Error::State(format!(
                "{}-bit quantizer used before calibration",
                self.bits
            ))
        })
    }
}

/// `scale = max|v| / max(Q_N, Q_P)`, floored at [`MIN_SCALE`].
pub fn calibrate_scale(values: &[f64], cfg: QuantConfig) -> Result<QuantConfig> {
    if values.is_empty() {
        return Err(Error::Input(
            "cannot calibrate a scale from no values".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("calibration values must be finite".into()));
    }
    if cfg.is_passthrough() {
        return cfg.with_scale(1.0);
    }
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let levels = cfg.q_n.max(cfg.q_p) as f64;
    cfg.with_scale((max_abs / levels).max(MIN_SCALE))
}

pub fn quantize(v: f64, cfg: &QuantConfig) -> Result<f64> {
    let s = cfg.calibrated_scale()?;
    Ok(quantize_with(v, s, cfg))
}

#[inline]
pub(crate) fn quantize_with(v: f64, s: f64, cfg: &QuantConfig) -> f64 {
    if cfg.is_passthrough() {
        return v;
    }
    let clipped = (v / s).clamp(-(cfg.q_n as f64), cfg.q_p as f64);
    s * clipped.round_ties_even()
}

/// STE indicator: does `v` lie inside the inclusive clip interval?
#[inline]
pub(crate) fn in_clip_range(v: f64, s: f64, cfg: &QuantConfig) -> bool {
    if cfg.is_passthrough() {
        return true;
    }
    let u = v / s;
    u >= -(cfg.q_n as f64) && u <= cfg.q_p as f64
}

/// Backward rule: `upstream` inside `[−Q_N, Q_P]` (on `v/s`), `0` outside.
pub fn ste_gradient(v_real: f64, upstream: f64, cfg: &QuantConfig) -> Result<f64> {
    let s = cfg.calibrated_scale()?;
    Ok(if in_clip_range(v_real, s, cfg) {
        upstream
    } else {
        0.0
    })
}
