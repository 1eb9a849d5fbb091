//! Depth L1 and semantic cross-entropy on rendered views.

use serde::{Deserialize, Serialize};

use super::l1_sign;
use crate::error::{OdgError, Result};
use crate::render::{RenderGrad, RenderOutput};

/// Probability floor inside the semantic cross-entropy.
pub const CE_FLOOR: f64 = 1e-6;

/// Per-pixel supervision for one camera view, pixel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTarget {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub sem: Vec<u8>,
    pub valid: Vec<bool>,
}

impl ViewTarget {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone)]
pub struct RenderLoss {
    pub value: f64,
    pub depth: f64,
    pub sem: f64,
    pub valid_pixels: usize,
    pub grads: Vec<RenderGrad>,
    /// Set when no pixel was valid.
    pub empty: bool,
}

/// `mean |depth_norm − D̄| + mean −log max(Ŝ_t, floor)` over valid pixels pooled
/// across all views of one stage.
pub fn rendering_loss(renders: &[RenderOutput], targets: &[ViewTarget]) -> Result<RenderLoss> {
    if renders.len() != targets.len() {
        return Err(OdgError::InvalidArgument(format!(
            "{} renders for {} targets",
            renders.len(),
            targets.len()
        )));
    }
    let mut n = 0usize;
    for (r, t) in renders.iter().zip(targets) {
        let pix = r.width * r.height;
        if t.width != r.width || t.height != r.height || t.depth.len() != pix || t.sem.len() != pix || t.valid.len() != pix {
            return Err(OdgError::InvalidArgument(format!(
                "target {}x{} does not match render {}x{}",
                t.width, t.height, r.width, r.height
            )));
        }
        n += t.valid_count();
    }
    let mut grads: Vec<RenderGrad> = renders
        .iter()
        .map(|r| RenderGrad::zeros(r.width, r.height, r.num_classes))
        .collect();
    if n == 0 {
        log::warn!("no valid pixels, rendering loss is zero");
        return Ok(RenderLoss {
            value: 0.0,
            depth: 0.0,
            sem: 0.0,
            valid_pixels: 0,
            grads,
            empty: true,
        });
    }
    let inv = 1.0 / n as f64;
    let (mut depth, mut sem) = (0.0, 0.0);
    for ((r, t), g) in renders.iter().zip(targets).zip(&mut grads) {
        let c = r.num_classes;
        for pix in 0..r.width * r.height {
            if !t.valid[pix] {
                continue;
            }
            let d = r.depth_norm[pix] - t.depth[pix];
            depth += d.abs();
            g.depth_norm[pix] = inv * l1_sign(d);
            let cls = t.sem[pix] as usize;
            if cls >= c {
                return Err(OdgError::InvalidArgument(format!(
                    "semantic target {cls} out of {c} classes"
                )));
            }
            let s = r.sem[pix * c + cls];
            if s > CE_FLOOR {
                sem -= s.ln();
                g.sem[pix * c + cls] = -inv / s;
            } else {
                sem -= CE_FLOOR.ln();
            }
        }
    }
    depth *= inv;
    sem *= inv;
    Ok(RenderLoss {
        value: depth + sem,
        depth,
        sem,
        valid_pixels: n,
        grads,
        empty: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(depth: f64, class: usize) -> (RenderOutput, ViewTarget) {
        let mut r = RenderOutput::zeros(2, 2, 3);
        for p in 0..4 {
            r.depth_norm[p] = depth;
            r.alpha[p] = 1.0;
            r.sem[p * 3 + class] = 1.0;
        }
        let t = ViewTarget {
            width: 2,
            height: 2,
            depth: vec![depth; 4],
            sem: vec![class as u8; 4],
            valid: vec![true, true, true, false],
        };
        (r, t)
    }

    #[test]
    fn perfect_render_is_zero() {
        let (r, t) = view(4.0, 1);
        let l = rendering_loss(&[r], &[t]).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.valid_pixels, 3);
    }

    #[test]
    fn constant_depth_offset() {
        let (mut r, t) = view(4.0, 1);
        r.depth_norm.iter_mut().for_each(|d| *d += 0.3);
        let l = rendering_loss(&[r], &[t]).unwrap();
        assert!((l.depth - 0.3).abs() < 1e-12);
    }

    #[test]
    fn all_invalid_is_flagged() {
        let (r, mut t) = view(4.0, 1);
        t.valid = vec![false; 4];
        let l = rendering_loss(&[r], &[t]).unwrap();
        assert!(l.empty);
        assert_eq!(l.value, 0.0);
    }
}
