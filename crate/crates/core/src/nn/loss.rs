//! Classification and box-regression losses with their gradients.

use crate::error::{Error, Result};
use crate::geometry::BoxDelta;

pub const DEFAULT_SMOOTH_L1_BETA: f64 = 1.0;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    softmax_cross_entropy_with_grad(logits, label).map(|(l, _)| l)
}

/// Returns `-log softmax(logits)[label]` and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = (log_z - logits[label]).max(0.0);
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - log_z).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit; `target` is 0 or 1.
pub fn sigmoid_bce_with_grad(logit: f64, target: f64) -> (f64, f64) {
    // log(1 + exp(-|x|)) + max(x, 0) - x * t
    let loss = (-logit.abs()).exp().ln_1p() + logit.max(0.0) - logit * target;
    (loss.max(0.0), sigmoid(logit) - target)
}

pub fn smooth_l1(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> Result<f64> {
    smooth_l1_with_grad(pred, target, beta).map(|(l, _)| l)
}

/// Smooth-L1 summed over the four delta components; gradient is w.r.t. `pred`.
pub fn smooth_l1_with_grad(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> Result<(f64, [f64; 4])> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("smooth-L1 beta must be positive, got {beta}")));
    }
    let (p, t) = (pred.to_array(), target.to_array());
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = p[i] - t[i];
        if d.abs() < beta {
            loss += 0.5 * d * d / beta;
            grad[i] = d / beta;
        } else {
            loss += d.abs() - 0.5 * beta;
            grad[i] = d.signum();
        }
    }
    Ok((loss, grad))
}
