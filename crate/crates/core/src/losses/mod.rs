//! Loss stack: Chamfer + focal occupancy supervision, matched box supervision,
//! rendered depth/semantic supervision and their weighted total. Every term
//! returns its gradient alongside its value.

mod boxes;
mod chamfer;
mod focal;
mod hungarian;
mod occupancy;
mod render_loss;

pub use boxes::{box_loss, box_match_cost, BoxLoss, BoxLossParams};
pub use chamfer::{chamfer_brute_force, chamfer_distance, chamfer_with_hash, ChamferResult, SpatialHash};
pub use focal::{focal_item, focal_loss, FocalParams};
pub use hungarian::{hungarian_match, Assignment};
pub use occupancy::{occupancy_loss, OccupancyLoss, StageOccupancy, StagePoints};
pub use render_loss::{rendering_loss, RenderLoss, ViewTarget, CE_FLOOR};

use serde::{Deserialize, Serialize};

use crate::error::{OdgError, Result};

/// Subgradient of `|x|` with zero at the kink.
pub(crate) fn l1_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub const DEFAULT_LAMBDA_3D: f64 = 0.2;
const LAMBDA_OUTER: f64 = 0.05;
const LAMBDA_INNER: f64 = 0.01;

/// Per-stage rendering weights: 0.05 on the first and last stage, 0.01 between.
pub fn default_lambda_schedule(stages: usize) -> Vec<f64> {
    (0..stages)
        .map(|l| if l == 0 || l + 1 == stages { LAMBDA_OUTER } else { LAMBDA_INNER })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLossReport {
    pub chamfer: f64,
    pub focal: f64,
    pub box_l1: f64,
    pub box_cls: f64,
    pub render_depth: f64,
    pub render_sem: f64,
    pub lambda: f64,
    /// Hungarian `(prediction, ground truth)` pairs.
    pub matches: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub occ: f64,
    #[serde(rename = "box")]
    pub box_loss: f64,
    /// Unweighted sum of per-stage rendering losses.
    pub render: f64,
    /// `Σ_ℓ λ_ℓ · render_ℓ`.
    pub render_weighted: f64,
    pub total: f64,
    pub lambda_3d: f64,
    pub initial_chamfer: f64,
    pub per_stage: Vec<StageLossReport>,
    pub warnings: Vec<String>,
}

impl LossReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("loss report serializes")
    }
}

/// `occ + λ_3d · box + Σ_ℓ λ_ℓ · render_ℓ`.
pub fn total_loss(
    occ: f64,
    box_loss: f64,
    render_per_stage: &[f64],
    lambda_3d: f64,
    lambdas: &[f64],
) -> Result<LossReport> {
    if render_per_stage.len() != lambdas.len() {
        return Err(OdgError::InvalidArgument(format!(
            "{} rendering terms for {} stage weights",
            render_per_stage.len(),
            lambdas.len()
        )));
    }
    if lambda_3d < 0.0 || lambdas.iter().any(|&l| l < 0.0) {
        return Err(OdgError::InvalidArgument("loss weights must be non-negative".into()));
    }
    let render: f64 = render_per_stage.iter().sum();
    let render_weighted: f64 = render_per_stage.iter().zip(lambdas).map(|(r, l)| r * l).sum();
    Ok(LossReport {
        occ,
        box_loss,
        render,
        render_weighted,
        total: occ + lambda_3d * box_loss + render_weighted,
        lambda_3d,
        ..Default::default()
    })
}
