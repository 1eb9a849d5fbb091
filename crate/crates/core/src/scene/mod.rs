//! Geometric and semantic domain types: Gaussians, boxes, voxel grids, cameras and
//! ego poses, plus grid/world conversions and ground-truth set extraction.

mod geom;
mod grid;

pub use geom::{
    covariance_from, is_rigid, normalize_quat, normalize_quat_backward, quat_norm,
    quat_to_rotation, rigid_inverse, rotation_grad_to_quat, transform_point, yaw_translation,
    Quat, IDENTITY_QUAT,
};
pub use grid::{extract_ground_truth, points_to_grid, GroundTruthSet, VoxelGrid, GRID_MAGIC};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{OdgError, Result};

pub type Vec3 = Vector3<f64>;

/// A 3D Gaussian primitive. `sem` holds per-class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mean: Vec3,
    pub scale: Vec3,
    pub rot: Quat,
    pub opacity: f64,
    pub sem: Vec<f64>,
}

impl Gaussian3D {
    pub fn new(mean: Vec3, scale: Vec3, rot: Quat, opacity: f64, sem: Vec<f64>) -> Self {
        Self {
            mean,
            scale,
            rot,
            opacity,
            sem,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (quat_norm(&self.rot) - 1.0).abs() > 1e-6 {
            return Err(OdgError::InvalidArgument(format!(
                "rotation {:?} is not a unit quaternion",
                self.rot
            )));
        }
        if self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(OdgError::InvalidArgument(format!(
                "scale {:?} must be positive",
                self.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(OdgError::InvalidArgument(format!(
                "opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        Ok(())
    }
}

/// `R · diag(s²) · Rᵀ`. A non-unit rotation is normalized; a zero one is rejected.
pub fn gaussian_covariance(g: &Gaussian3D) -> Result<Matrix3<f64>> {
    covariance_from(&g.scale, &g.rot)
}

/// Box extents, yaw and planar velocity attached to dynamic queries. Vertical
/// velocity is identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAttributes {
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
}

impl BoxAttributes {
    pub const fn vz(&self) -> f64 {
        0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0 && self.w > 0.0 && self.h > 0.0) {
            return Err(OdgError::InvalidArgument(format!(
                "box extents must be positive, got ({}, {}, {})",
                self.l, self.w, self.h
            )));
        }
        Ok(())
    }
}

impl Default for BoxAttributes {
    fn default() -> Self {
        Self {
            l: 4.0,
            w: 2.0,
            h: 1.5,
            theta: 0.0,
            vx: 0.0,
            vy: 0.0,
        }
    }
}

/// Pinhole camera. Camera frame: x right, y down, z forward. Pixel `(u, v)` is
/// centered at integer coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_to_world: Matrix4<f64>,
}

impl CameraModel {
    /// Camera at `position` looking along yaw `yaw` (radians about +z), pitched
    /// down by `pitch` radians, with a horizontal field of view `hfov`.
    pub fn looking(
        position: Vec3,
        yaw: f64,
        pitch: f64,
        hfov: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vec3::new(cy * cp, sy * cp, -sp);
        let right = Vec3::new(sy, -cy, 0.0);
        let down = forward.cross(&right);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&down);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&forward);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&position);
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            cam_to_world: m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(OdgError::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(OdgError::InvalidArgument("image size must be nonzero".into()));
        }
        if !is_rigid(&self.cam_to_world, 1e-6) {
            return Err(OdgError::InvalidArgument("cam_to_world is not rigid".into()));
        }
        Ok(())
    }

    /// World-to-camera rotation and translation.
    pub fn world_to_cam(&self) -> (Matrix3<f64>, Vec3) {
        let inv = rigid_inverse(&self.cam_to_world);
        (
            inv.fixed_view::<3, 3>(0, 0).into_owned(),
            inv.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn center(&self) -> Vec3 {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Unit ray direction in world coordinates through pixel coordinate `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize();
        self.cam_to_world.fixed_view::<3, 3>(0, 0) * d
    }

    /// Same camera, pre-multiplied by a rigid transform (e.g. ego-to-world).
    pub fn transformed(&self, m: &Matrix4<f64>) -> Self {
        Self {
            cam_to_world: m * self.cam_to_world,
            ..self.clone()
        }
    }

    /// Intrinsics of a `factor × factor` area-pooled image: pooled texel `b` covers
    /// full-res pixels `factor·b .. factor·b + factor − 1`, centered at
    /// `factor·b + (factor − 1)/2`.
    pub fn pooled(&self, factor: usize) -> Self {
        let f = factor as f64;
        let shift = (f - 1.0) / 2.0;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx - shift) / f,
            cy: (self.cy - shift) / f,
            width: self.width / factor,
            height: self.height / factor,
            cam_to_world: self.cam_to_world,
        }
    }

    /// Projects a world point to `(u, v, z)`; `None` at or behind the near plane `z_near`.
    pub fn project(&self, p: &Vec3, z_near: f64) -> Option<(f64, f64, f64)> {
        let (r, t) = self.world_to_cam();
        let c = r * p + t;
        (c.z > z_near).then(|| (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// Intrinsics rescaled so that low-res pixel `b` sits at full-res pixel `stride·b`.
    pub fn strided(&self, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width.div_ceil(stride),
            height: self.height.div_ceil(stride),
            cam_to_world: self.cam_to_world,
        }
    }
}

/// Length of an encoded box vector: center, extents, heading as (sin, cos), planar velocity.
pub const BOX_DIM: usize = 10;

/// An annotated object box at the keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxTarget {
    pub center: Vec3,
    pub attrs: BoxAttributes,
    pub class: usize,
}

impl BoxTarget {
    /// `[cx, cy, cz, l, w, h, sinθ, cosθ, vx, vy]`.
    pub fn encode(&self) -> [f64; BOX_DIM] {
        let a = &self.attrs;
        let (s, c) = a.theta.sin_cos();
        [
            self.center.x,
            self.center.y,
            self.center.z,
            a.l,
            a.w,
            a.h,
            s,
            c,
            a.vx,
            a.vy,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub timestamp: f64,
    pub pose: Matrix4<f64>,
}

impl EgoPose {
    pub fn identity(timestamp: f64) -> Self {
        Self {
            timestamp,
            pose: Matrix4::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_rigid(&self.pose, 1e-6) {
            return Err(OdgError::InvalidArgument("ego pose is not rigid".into()));
        }
        Ok(())
    }

    pub fn translation(&self) -> Vec3 {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }
}
