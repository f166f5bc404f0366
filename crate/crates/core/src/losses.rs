//! Scalar loss functions: L1 on motion maps, pixel-wise BCE, soft DICE, the
//! BCE/DICE composite, and the weighted total.
//!
//! All losses use mean pixel reduction so the weighting constants keep their
//! meaning independent of image size. These scalar forms are the reference
//! semantics; the differentiable training path in [`crate::nn`] implements
//! the same formulas and is cross-checked against them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LtdError, Result};

/// Clamp bound keeping `ln` finite in BCE.
pub const BCE_EPS: f64 = 1e-7;
/// Smoothing constant of the soft DICE loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// Weights of the total loss: `total = lambda0 * l_ltd + lambda1 * l_lrs + l_seg`,
/// with `a` blending BCE against soft DICE inside the mask losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub a: f64,
    pub lambda0: f64,
    pub lambda1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            a: 0.5,
            lambda0: 0.1,
            lambda1: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(LtdError::InvalidArgument(format!(
                "a must lie in [0, 1], got {}",
                self.a
            )));
        }
        if self.lambda0 < 0.0 || self.lambda1 < 0.0 {
            return Err(LtdError::InvalidArgument(
                "lambda0 and lambda1 must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-component losses of one step or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ltd: f64,
    pub l_lrs: f64,
    pub l_seg: f64,
    pub total: f64,
}

fn check_dims(pred: &Array2<f64>, target: &Array2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(LtdError::shape(
            format!("{}x{}", target.dim().0, target.dim().1),
            format!("{}x{}", pred.dim().0, pred.dim().1),
        ));
    }
    Ok(())
}

/// Mean absolute error.
pub fn l1_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    check_dims(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

/// Mean binary cross-entropy, with predictions clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    check_dims(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n)
}

/// Soft DICE loss `1 - (2 Σpt + eps) / (Σp + Σt + eps)` with `eps = 1.0`.
pub fn soft_dice_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    check_dims(pred, target)?;
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        inter += p * t;
        total += p + t;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH))
}

/// `a * BCE + (1 - a) * soft DICE`.
pub fn composite_mask_loss(pred: &Array2<f64>, target: &Array2<f64>, a: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) {
        return Err(LtdError::InvalidArgument(format!(
            "a must lie in [0, 1], got {a}"
        )));
    }
    Ok(a * bce_loss(pred, target)? + (1.0 - a) * soft_dice_loss(pred, target)?)
}

/// Combine the three component losses per the weighted total.
pub fn total_loss(l_ltd: f64, l_lrs: f64, l_seg: f64, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    for (name, v) in [("l_ltd", l_ltd), ("l_lrs", l_lrs), ("l_seg", l_seg)] {
        if v < 0.0 {
            return Err(LtdError::InvalidArgument(format!(
                "{name} must be non-negative, got {v}"
            )));
        }
    }
    Ok(LossReport {
        l_ltd,
        l_lrs,
        l_seg,
        total: w.lambda0 * l_ltd + w.lambda1 * l_lrs + l_seg,
    })
}
