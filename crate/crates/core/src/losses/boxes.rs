//! Set-based box supervision for dynamic queries.

use serde::{Deserialize, Serialize};

use super::focal::{focal_item, focal_loss, FocalParams};
use super::hungarian::hungarian_match;
use super::l1_sign;
use crate::error::{OdgError, Result};
use crate::scene::{BoxTarget, BOX_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxLossParams {
    pub w_reg: f64,
    pub w_cls: f64,
    pub focal: FocalParams,
}

impl Default for BoxLossParams {
    fn default() -> Self {
        Self {
            w_reg: 1.0,
            w_cls: 1.0,
            focal: FocalParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoxLoss {
    pub value: f64,
    pub l1: f64,
    pub cls: f64,
    /// `(prediction, ground truth)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub grad_pred: Vec<f64>,
    pub grad_class: Vec<f64>,
}

fn l1_mean(a: &[f64], b: &[f64; BOX_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / BOX_DIM as f64
}

/// Matching cost `w_reg · mean|Δattrs| + w_cls · focal(class)` for every
/// prediction/ground-truth pair, row-major `D × B`.
pub fn box_match_cost(
    box_pred: &[f64],
    box_class: &[f64],
    targets: &[BoxTarget],
    num_classes: usize,
    params: &BoxLossParams,
) -> Vec<f64> {
    let d = box_pred.len() / BOX_DIM;
    let width = num_classes + 1;
    let enc: Vec<[f64; BOX_DIM]> = targets.iter().map(BoxTarget::encode).collect();
    let mut scratch = vec![0.0; width];
    let mut cost = Vec::with_capacity(d * targets.len());
    for i in 0..d {
        let pred = &box_pred[i * BOX_DIM..(i + 1) * BOX_DIM];
        let logits = &box_class[i * width..(i + 1) * width];
        for (t, e) in targets.iter().zip(&enc) {
            let cls = focal_item(logits, t.class, params.focal, &mut scratch);
            cost.push(params.w_reg * l1_mean(pred, e) + params.w_cls * cls);
        }
    }
    cost
}

/// Hungarian-matched L1 on box vectors (averaged over matched pairs) plus focal
/// classification of every prediction, unmatched ones toward the no-object class
/// `num_classes`.
pub fn box_loss(
    box_pred: &[f64],
    box_class: &[f64],
    targets: &[BoxTarget],
    num_classes: usize,
    params: &BoxLossParams,
) -> Result<BoxLoss> {
    let width = num_classes + 1;
    if box_pred.len() % BOX_DIM != 0 || box_class.len() != box_pred.len() / BOX_DIM * width {
        return Err(OdgError::InvalidArgument(format!(
            "box loss: {} box values and {} class logits do not describe the same predictions",
            box_pred.len(),
            box_class.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| t.class >= num_classes) {
        return Err(OdgError::InvalidArgument(format!(
            "box target class {} out of {num_classes}",
            t.class
        )));
    }
    let d = box_pred.len() / BOX_DIM;
    let cost = box_match_cost(box_pred, box_class, targets, num_classes, params);
    let assignment = hungarian_match(&cost, d, targets.len())?;

    let mut grad_pred = vec![0.0; box_pred.len()];
    let mut l1 = 0.0;
    let n_match = assignment.pairs.len();
    let mut cls_targets = vec![num_classes; d];
    for &(i, j) in &assignment.pairs {
        cls_targets[i] = targets[j].class;
        let e = targets[j].encode();
        let pred = &box_pred[i * BOX_DIM..(i + 1) * BOX_DIM];
        l1 += l1_mean(pred, &e);
        let scale = 1.0 / (BOX_DIM * n_match) as f64;
        for k in 0..BOX_DIM {
            grad_pred[i * BOX_DIM + k] = scale * l1_sign(pred[k] - e[k]);
        }
    }
    if n_match > 0 {
        l1 /= n_match as f64;
    }
    let (cls, grad_class) = focal_loss(box_class, width, &cls_targets, params.focal)?;
    Ok(BoxLoss {
        value: l1 + cls,
        l1,
        cls,
        matches: assignment.pairs,
        grad_pred,
        grad_class,
    })
}
