//! Scalar loss functions, usable directly or through graph nodes.

use serde::{Deserialize, Serialize};

use super::tensor::Real;
use crate::error::{Error, Result};

/// Lower bound applied to log-probabilities inside cross-entropy.
pub const LOG_CLAMP: f64 = -30.0;

/// Per-element penalty family for regression residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionPenalty {
    /// `0.5r²` below 0.5, `(r − 0.125)² − 2` above 2.125, `r − 0.125` between.
    /// Has a jump of 0.25 at `r = 0.5`.
    #[default]
    SmoothDistance,
    /// Classical Huber/smooth-L1 with unit threshold, continuous everywhere.
    ContinuousSmoothL1,
}

impl RegressionPenalty {
    pub fn value(self, r: f64) -> f64 {
        match self {
            RegressionPenalty::SmoothDistance => {
                if r < 0.5 {
                    0.5 * r * r
                } else if r > 2.125 {
                    (r - 0.125).powi(2) - 2.0
                } else {
                    r - 0.125
                }
            }
            RegressionPenalty::ContinuousSmoothL1 => {
                if r < 1.0 {
                    0.5 * r * r
                } else {
                    r - 0.5
                }
            }
        }
    }

    /// d/dr; at the `r = 0.5` jump the quadratic branch's slope is used.
    pub fn derivative(self, r: f64) -> f64 {
        match self {
            RegressionPenalty::SmoothDistance => {
                if r <= 0.5 {
                    r
                } else if r > 2.125 {
                    2.0 * (r - 0.125)
                } else {
                    1.0
                }
            }
            RegressionPenalty::ContinuousSmoothL1 => {
                if r < 1.0 {
                    r
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Number of entries that contributed.
    pub count: usize,
}

impl LossValue {
    /// No entry was masked in; `value` is then 0.
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Mean penalty over entries whose mask is non-zero.
pub fn smooth_distance_loss<T: Real>(
    pred: &[T],
    target: &[T],
    mask: &[T],
    penalty: RegressionPenalty,
) -> Result<LossValue> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "regression loss operands differ: {} / {} / {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..pred.len() {
        if mask[i] != T::zero() {
            total += penalty.value((pred[i].f64() - target[i].f64()).abs());
            count += 1;
        }
    }
    Ok(LossValue {
        value: if count == 0 { 0.0 } else { total / count as f64 },
        count,
    })
}

pub fn rmse_loss<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "rmse operands differ or are empty: {} / {}",
            pred.len(),
            target.len()
        )));
    }
    let ss: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p.f64() - t.f64()).powi(2))
        .sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub(crate) fn check_target(target: &[f64]) -> Result<()> {
    let s: f64 = target.iter().sum();
    if (s - 1.0).abs() > 1e-6 || target.iter().any(|&t| t < -1e-12) {
        return Err(Error::TargetNotNormalized(s));
    }
    Ok(())
}

/// `−Σ t_k · max(log softmax(z)_k, −30)`.
pub fn cross_entropy_soft(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} logits for a {}-class target",
            logits.len(),
            target.len()
        )));
    }
    check_target(target)?;
    Ok(-log_softmax(logits)
        .iter()
        .zip(target)
        .map(|(&l, &t)| t * l.max(LOG_CLAMP))
        .sum::<f64>())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
