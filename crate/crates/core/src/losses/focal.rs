//! Softmax focal loss.

use serde::{Deserialize, Serialize};

use crate::error::{OdgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Loss of one item and its gradient with respect to that item's logits.
/// `1 − p_t` is summed from the other probabilities so that confident items keep
/// full relative precision.
pub fn focal_item(logits: &[f64], target: usize, p: FocalParams, grad: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = (z - max).exp();
        sum += *g;
    }
    for g in grad.iter_mut() {
        *g /= sum;
    }
    let log_pt = logits[target] - max - sum.ln();
    let pt = grad[target];
    let one_m: f64 = grad
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, v)| v)
        .sum();
    let w = if p.gamma == 0.0 { 1.0 } else { one_m.powf(p.gamma) };
    let loss = -p.alpha * w * log_pt;
    // d loss / d log p_t; the softmax Jacobian of log p_t is (δ_tj − p_j).
    let dw = if p.gamma == 0.0 {
        0.0
    } else {
        p.gamma * one_m.powf(p.gamma - 1.0)
    };
    let dl_dlogpt = -p.alpha * (w - dw * pt * log_pt);
    for (j, g) in grad.iter_mut().enumerate() {
        let delta = if j == target { 1.0 } else { 0.0 };
        *g = dl_dlogpt * (delta - *g);
    }
    loss
}

/// Mean focal loss over `targets.len()` items of row-major `logits`; returns the
/// loss and the gradient with respect to `logits`.
pub fn focal_loss(
    logits: &[f64],
    num_classes: usize,
    targets: &[usize],
    params: FocalParams,
) -> Result<(f64, Vec<f64>)> {
    if num_classes == 0 || logits.len() != targets.len() * num_classes {
        return Err(OdgError::InvalidArgument(format!(
            "focal loss: {} logits for {} items of {} classes",
            logits.len(),
            targets.len(),
            num_classes
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= num_classes) {
        return Err(OdgError::InvalidArgument(format!(
            "focal loss: target class {t} out of {num_classes}"
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    if targets.is_empty() {
        return Ok((0.0, grad));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = i * num_classes..(i + 1) * num_classes;
        total += focal_item(&logits[row.clone()], t, params, &mut grad[row]);
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok((total / n, grad))
}
