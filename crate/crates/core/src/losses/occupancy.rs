//! Point-set occupancy supervision: Chamfer on Gaussian means plus focal loss on
//! per-Gaussian class logits.

use super::chamfer::{chamfer_with_hash, SpatialHash};
use super::focal::{focal_loss, FocalParams};
use crate::error::{OdgError, Result};
use crate::scene::{GroundTruthSet, Vec3};

/// One stage's predicted means (world coordinates) and row-major class logits.
#[derive(Debug, Clone, Copy)]
pub struct StagePoints<'a> {
    pub means: &'a [Vec3],
    pub logits: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub struct StageOccupancy {
    pub chamfer: f64,
    pub focal: f64,
    pub grad_means: Vec<Vec3>,
    pub grad_logits: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct OccupancyLoss {
    pub value: f64,
    pub initial_chamfer: f64,
    pub grad_initial: Vec<Vec3>,
    pub stages: Vec<StageOccupancy>,
    /// Set when the ground truth was empty and the loss was skipped.
    pub skipped: bool,
}

/// `CD(initial, P) + Σ_ℓ [CD(means_ℓ, P) + Focal(logits_ℓ, nearest-GT classes)]`,
/// with the full ground-truth set at every stage.
pub fn occupancy_loss(
    initial: &[Vec3],
    stages: &[StagePoints],
    gt: &GroundTruthSet,
    num_classes: usize,
    focal: FocalParams,
) -> Result<OccupancyLoss> {
    if stages.is_empty() {
        return Err(OdgError::InvalidArgument("occupancy loss needs at least one stage".into()));
    }
    if gt.is_empty() {
        log::warn!("empty ground truth, occupancy loss skipped");
        return Ok(OccupancyLoss {
            grad_initial: vec![Vec3::zeros(); initial.len()],
            stages: stages
                .iter()
                .map(|s| StageOccupancy {
                    grad_means: vec![Vec3::zeros(); s.means.len()],
                    grad_logits: vec![0.0; s.logits.len()],
                    ..Default::default()
                })
                .collect(),
            skipped: true,
            ..Default::default()
        });
    }
    let hash = SpatialHash::build(&gt.points)?;
    let init = chamfer_with_hash(initial, &hash)?;
    let mut out = OccupancyLoss {
        value: init.value,
        initial_chamfer: init.value,
        grad_initial: init.grad,
        ..Default::default()
    };
    for s in stages {
        let cd = chamfer_with_hash(s.means, &hash)?;
        let targets: Vec<usize> = cd.nn_ab.iter().map(|&j| gt.classes[j] as usize).collect();
        let (fl, grad_logits) = focal_loss(s.logits, num_classes, &targets, focal)?;
        out.value += cd.value + fl;
        out.stages.push(StageOccupancy {
            chamfer: cd.value,
            focal: fl,
            grad_means: cd.grad,
            grad_logits,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_prediction() {
        let gt = GroundTruthSet {
            points: vec![Vec3::new(0.25, 0.25, 0.25), Vec3::new(1.25, 0.25, 0.25)],
            classes: vec![0, 2],
        };
        let logits = [20.0, -20.0, -20.0, -20.0, -20.0, 20.0];
        let st = [StagePoints {
            means: &gt.points,
            logits: &logits,
        }];
        let r = occupancy_loss(&gt.points, &st, &gt, 3, FocalParams::default()).unwrap();
        assert_eq!(r.stages[0].chamfer, 0.0);
        assert!(r.stages[0].focal < 1e-6);
        assert!(r.value < 1e-6);
    }

    #[test]
    fn empty_ground_truth_skips() {
        let p = [Vec3::zeros()];
        let st = [StagePoints {
            means: &p,
            logits: &[0.0, 0.0],
        }];
        let r = occupancy_loss(&p, &st, &GroundTruthSet::default(), 2, FocalParams::default()).unwrap();
        assert!(r.skipped);
        assert_eq!(r.value, 0.0);
    }
}
