//! Temporal alignment of sampling points into history frames.
//!
//! Dynamic points are first shifted back along their planar velocity, then every
//! point is carried from the reference ego frame into the target ego frame.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{OdgError, Result};
use crate::scene::{is_rigid, rigid_inverse, transform_point, EgoPose, Vec3};

/// Which query set a point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryKind {
    Static,
    Dynamic,
}

/// Warp from the reference (key) frame to one history frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWarp {
    pub t_target: f64,
    pub t_ref: f64,
    pub pose_target: EgoPose,
    pub pose_ref: EgoPose,
    /// Planar velocity of the owning dynamic query, if any.
    pub velocity: Option<[f64; 2]>,
}

impl FrameWarp {
    pub fn new(pose_ref: &EgoPose, pose_target: &EgoPose) -> Result<Self> {
        let w = Self {
            t_target: pose_target.timestamp,
            t_ref: pose_ref.timestamp,
            pose_target: pose_target.clone(),
            pose_ref: pose_ref.clone(),
            velocity: None,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn with_velocity(mut self, v: [f64; 2]) -> Self {
        self.velocity = Some(v);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_target > self.t_ref {
            return Err(OdgError::InvalidArgument(format!(
                "history timestamp {} is after the reference {}",
                self.t_target, self.t_ref
            )));
        }
        self.pose_target.validate()?;
        self.pose_ref.validate()
    }

    pub fn dt(&self) -> f64 {
        self.t_ref - self.t_target
    }

    /// The 4x4 map `P_target⁻¹ · P_ref`.
    pub fn ego_matrix(&self) -> Matrix4<f64> {
        rigid_inverse(&self.pose_target.pose) * self.pose_ref.pose
    }
}

/// Constant-velocity back-projection: `x − vx·Δt`, `y − vy·Δt`, `z` unchanged.
pub fn warp_dynamic(p: &Vec3, v: [f64; 2], t_ref: f64, t_target: f64) -> Vec3 {
    let dt = t_ref - t_target;
    Vec3::new(p.x - v[0] * dt, p.y - v[1] * dt, p.z)
}

/// Carries `p` from the reference ego frame to the target ego frame.
pub fn warp_ego(p: &Vec3, pose_ref: &EgoPose, pose_target: &EgoPose) -> Result<Vec3> {
    if !is_rigid(&pose_ref.pose, 1e-6) || !is_rigid(&pose_target.pose, 1e-6) {
        return Err(OdgError::InvalidArgument("ego pose is not rigid".into()));
    }
    let m = rigid_inverse(&pose_target.pose) * pose_ref.pose;
    Ok(transform_point(&m, p))
}

pub fn compose_warp(p: &Vec3, kind: QueryKind, warp: &FrameWarp) -> Result<Vec3> {
    match kind {
        QueryKind::Static => warp_ego(p, &warp.pose_ref, &warp.pose_target),
        QueryKind::Dynamic => {
            let v = warp.velocity.ok_or_else(|| {
                OdgError::InvalidArgument("dynamic warp requires a velocity".into())
            })?;
            let shifted = warp_dynamic(p, v, warp.t_ref, warp.t_target);
            warp_ego(&shifted, &warp.pose_ref, &warp.pose_target)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::yaw_translation;

    fn pose(t: f64, yaw: f64, x: f64, y: f64) -> EgoPose {
        EgoPose {
            timestamp: t,
            pose: yaw_translation(yaw, Vec3::new(x, y, 0.0)),
        }
    }

    #[test]
    fn zero_velocity_is_identity() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(warp_dynamic(&p, [0.0, 0.0], 1.0, 0.0), p);
    }

    #[test]
    fn velocity_shift() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        let q = warp_dynamic(&p, [2.0, 0.0], 0.5, 0.0);
        assert!((q.x - 0.0).abs() < 1e-15);
        assert_eq!(q.y, 2.0);
        assert_eq!(q.z, 3.0);
    }

    #[test]
    fn two_step_warp_equals_one_step() {
        let p = Vec3::new(0.3, -1.2, 0.7);
        let v = [1.3, -0.4];
        let a = warp_dynamic(&warp_dynamic(&p, v, 1.0, 0.5), v, 0.5, 0.0);
        let b = warp_dynamic(&p, v, 1.0, 0.0);
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn ego_identity_and_translation() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        let a = pose(0.0, 0.4, 1.0, -2.0);
        assert!((warp_ego(&p, &a, &a).unwrap() - p).norm() < 1e-12);
        let r = EgoPose::identity(1.0);
        let t = pose(0.0, 0.0, 3.0, -1.0);
        let q = warp_ego(&p, &r, &t).unwrap();
        assert!((q - Vec3::new(-2.0, 3.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn non_rigid_rejected() {
        let mut bad = EgoPose::identity(0.0);
        bad.pose[(0, 0)] = 2.0;
        assert!(warp_ego(&Vec3::zeros(), &EgoPose::identity(1.0), &bad).is_err());
    }

    #[test]
    fn dynamic_hand_composition() {
        // v = (1, 1), dt = 1, target ego sits at (2, 0): x' = (x − 1) − 2, y' = y − 1.
        let r = EgoPose::identity(1.0);
        let t = pose(0.0, 0.0, 2.0, 0.0);
        let w = FrameWarp::new(&r, &t).unwrap().with_velocity([1.0, 1.0]);
        let q = compose_warp(&Vec3::new(5.0, 4.0, 1.0), QueryKind::Dynamic, &w).unwrap();
        assert!((q - Vec3::new(2.0, 3.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn dynamic_requires_velocity() {
        let r = EgoPose::identity(1.0);
        let w = FrameWarp::new(&r, &EgoPose::identity(0.5)).unwrap();
        assert!(compose_warp(&Vec3::zeros(), QueryKind::Dynamic, &w).is_err());
        assert!(compose_warp(&Vec3::zeros(), QueryKind::Static, &w).is_ok());
    }

    #[test]
    fn future_target_rejected() {
        assert!(FrameWarp::new(&EgoPose::identity(0.0), &EgoPose::identity(1.0)).is_err());
    }
}
