//! Image feature planes and differentiable multi-view, multi-frame point sampling.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{OdgError, Result};
use crate::motion::FrameWarp;
use crate::render::Z_NEAR;
use crate::scene::{CameraModel, EgoPose, Vec3};

/// How sampling points are carried into history frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MotionMode {
    /// History frames are sampled as if the ego had not moved.
    #[serde(rename = "none")]
    None,
    /// Ego-motion compensation for every point.
    #[serde(rename = "ego")]
    Ego,
    /// Ego-motion for every point plus constant-velocity shifts for dynamic ones.
    #[default]
    #[serde(rename = "ego+dyn")]
    EgoDynamic,
}

/// One camera's feature map at one frame. `camera` maps the frame's ego
/// coordinates to texel coordinates (texel centers at integers).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlane {
    pub frame: usize,
    pub camera: CameraModel,
    pub channels: usize,
    /// `(v · width + u) · channels + c`.
    pub data: Vec<f64>,
}

impl FeaturePlane {
    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.camera.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Feature planes of every camera over the keyframe and its history frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlaneSet {
    pub channels: usize,
    /// Keyframe ego pose; sampling points are given in this frame.
    pub reference: EgoPose,
    pub frames: Vec<EgoPose>,
    pub planes: Vec<FeaturePlane>,
}

impl FeaturePlaneSet {
    pub fn validate(&self) -> Result<()> {
        for p in &self.planes {
            if p.channels != self.channels {
                return Err(OdgError::InvalidArgument(format!(
                    "plane has {} channels, set declares {}",
                    p.channels, self.channels
                )));
            }
            if p.frame >= self.frames.len() {
                return Err(OdgError::InvalidArgument(format!("plane refers to missing frame {}", p.frame)));
            }
            if p.data.len() != p.width() * p.height() * p.channels {
                return Err(OdgError::InvalidArgument("plane data size mismatch".into()));
            }
            if p.width() < 2 || p.height() < 2 {
                return Err(OdgError::InvalidArgument("feature planes must be at least 2x2".into()));
            }
        }
        for f in &self.frames {
            FrameWarp::new(&self.reference, f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct PlaneView {
    frame: usize,
    rot: Matrix3<f64>,
    trans: Vec3,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

/// Precomputed reference-frame-to-texel maps for one plane set and motion mode.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    planes: &'a FeaturePlaneSet,
    views: Vec<PlaneView>,
    /// `t_ref − t_frame` per frame.
    dts: Vec<f64>,
    mode: MotionMode,
}

/// Result of sampling one point: mean feature over valid views and the number of
/// valid views.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSample {
    pub feat: Vec<f64>,
    pub valid: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(planes: &'a FeaturePlaneSet, mode: MotionMode) -> Result<Self> {
        planes.validate()?;
        let mut ego = Vec::with_capacity(planes.frames.len());
        let mut dts = Vec::with_capacity(planes.frames.len());
        for f in &planes.frames {
            let w = FrameWarp::new(&planes.reference, f)?;
            dts.push(w.dt());
            ego.push(match mode {
                MotionMode::None => nalgebra::Matrix4::identity(),
                _ => w.ego_matrix(),
            });
        }
        let views = planes
            .planes
            .iter()
            .map(|p| {
                let (rc, tc) = p.camera.world_to_cam();
                let m = &ego[p.frame];
                let rm = m.fixed_view::<3, 3>(0, 0).into_owned();
                let tm = m.fixed_view::<3, 1>(0, 3).into_owned();
                PlaneView {
                    frame: p.frame,
                    rot: rc * rm,
                    trans: rc * tm + tc,
                    fx: p.camera.fx,
                    fy: p.camera.fy,
                    cx: p.camera.cx,
                    cy: p.camera.cy,
                }
            })
            .collect();
        Ok(Self {
            planes,
            views,
            dts,
            mode,
        })
    }

    pub fn channels(&self) -> usize {
        self.planes.channels
    }

    fn shift(&self, frame: usize, velocity: Option<[f64; 2]>) -> Vec3 {
        match (self.mode, velocity) {
            (MotionMode::EgoDynamic, Some(v)) => {
                let dt = self.dts[frame];
                Vec3::new(-v[0] * dt, -v[1] * dt, 0.0)
            }
            _ => Vec3::zeros(),
        }
    }

    /// Visits every valid view of `p` with texel coordinates, camera-space point,
    /// and the view index.
    fn for_each_view<F: FnMut(usize, f64, f64, &Vec3)>(&self, p: &Vec3, velocity: Option<[f64; 2]>, mut f: F) {
        for (k, view) in self.views.iter().enumerate() {
            let q = p + self.shift(view.frame, velocity);
            let c = view.rot * q + view.trans;
            if !(c.z > Z_NEAR) {
                continue;
            }
            let x = view.fx * c.x / c.z + view.cx;
            let y = view.fy * c.y / c.z + view.cy;
            let plane = &self.planes.planes[k];
            if x >= 0.0 && y >= 0.0 && x <= (plane.width() - 1) as f64 && y <= (plane.height() - 1) as f64 {
                f(k, x, y, &c);
            }
        }
    }

    /// Mean bilinear sample over every view where `p` projects inside the image
    /// with positive depth; zeros when none does.
    pub fn sample(&self, p: &Vec3, velocity: Option<[f64; 2]>) -> PointSample {
        let ch = self.channels();
        let mut feat = vec![0.0; ch];
        let mut n = 0;
        self.for_each_view(p, velocity, |k, x, y, _| {
            let plane = &self.planes.planes[k];
            let (taps, _) = bilinear_taps(plane, x, y);
            for (w, u, v) in taps {
                for (f, val) in feat.iter_mut().zip(plane.at(u, v)) {
                    *f += w * val;
                }
            }
            n += 1;
        });
        if n > 0 {
            feat.iter_mut().for_each(|f| *f /= n as f64);
        }
        PointSample { feat, valid: n }
    }

    /// Gradient with respect to `p` of `⟨grad, sample(p)⟩`, holding the set of
    /// valid views fixed.
    pub fn backward(&self, p: &Vec3, velocity: Option<[f64; 2]>, grad: &[f64]) -> Vec3 {
        let mut n = 0;
        self.for_each_view(p, velocity, |_, _, _, _| n += 1);
        if n == 0 {
            return Vec3::zeros();
        }
        let inv = 1.0 / n as f64;
        let mut out = Vec3::zeros();
        self.for_each_view(p, velocity, |k, x, y, c| {
            let plane = &self.planes.planes[k];
            let view = &self.views[k];
            let (_, (x0, y0, ax, ay)) = bilinear_taps(plane, x, y);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..plane.channels {
                let f00 = plane.at(x0, y0)[ch];
                let f10 = plane.at(x0 + 1, y0)[ch];
                let f01 = plane.at(x0, y0 + 1)[ch];
                let f11 = plane.at(x0 + 1, y0 + 1)[ch];
                let dfdx = (1.0 - ay) * (f10 - f00) + ay * (f11 - f01);
                let dfdy = (1.0 - ax) * (f01 - f00) + ax * (f11 - f10);
                gx += grad[ch] * dfdx;
                gy += grad[ch] * dfdy;
            }
            let iz = 1.0 / c.z;
            let gc = Vec3::new(
                gx * view.fx * iz,
                gy * view.fy * iz,
                -(gx * view.fx * c.x + gy * view.fy * c.y) * iz * iz,
            );
            out += view.rot.transpose() * gc * inv;
        });
        out
    }
}

/// Four bilinear taps `(weight, u, v)` and the cell `(x0, y0, ax, ay)`.
fn bilinear_taps(plane: &FeaturePlane, x: f64, y: f64) -> ([(f64, usize, usize); 4], (usize, usize, f64, f64)) {
    let x0 = (x.floor() as usize).min(plane.width() - 2);
    let y0 = (y.floor() as usize).min(plane.height() - 2);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    (
        [
            ((1.0 - ax) * (1.0 - ay), x0, y0),
            (ax * (1.0 - ay), x0 + 1, y0),
            ((1.0 - ax) * ay, x0, y0 + 1),
            (ax * ay, x0 + 1, y0 + 1),
        ],
        (x0, y0, ax, ay),
    )
}

/// Samples every point; returns row-major `N × F` features and per-point
/// validity flags.
pub fn sample_point_features(
    points: &[Vec3],
    velocities: Option<&[[f64; 2]]>,
    planes: &FeaturePlaneSet,
    mode: MotionMode,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if let Some(v) = velocities {
        if v.len() != points.len() {
            return Err(OdgError::InvalidArgument("one velocity per point required".into()));
        }
    }
    let s = Sampler::new(planes, mode)?;
    let mut feats = Vec::with_capacity(points.len() * s.channels());
    let mut valid = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let r = s.sample(p, velocities.map(|v| v[i]));
        feats.extend(r.feat);
        valid.push(r.valid > 0);
    }
    Ok((feats, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn plane_camera(w: usize, h: usize) -> CameraModel {
        CameraModel {
            fx: 4.0,
            fy: 4.0,
            cx: 2.0,
            cy: 2.0,
            width: w,
            height: h,
            cam_to_world: Matrix4::identity(),
        }
    }

    fn set_with(data: Vec<f64>, channels: usize, w: usize, h: usize) -> FeaturePlaneSet {
        FeaturePlaneSet {
            channels,
            reference: EgoPose::identity(0.0),
            frames: vec![EgoPose::identity(0.0)],
            planes: vec![FeaturePlane {
                frame: 0,
                camera: plane_camera(w, h),
                channels,
                data,
            }],
        }
    }

    #[test]
    fn constant_plane() {
        let set = set_with(vec![0.7; 5 * 5 * 2], 2, 5, 5);
        let s = Sampler::new(&set, MotionMode::Ego).unwrap();
        let r = s.sample(&Vec3::new(0.1, -0.2, 3.0), None);
        assert_eq!(r.valid, 1);
        assert!(r.feat.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn outside_is_zero_and_invalid() {
        let set = set_with(vec![1.0; 25], 1, 5, 5);
        let s = Sampler::new(&set, MotionMode::Ego).unwrap();
        let r = s.sample(&Vec3::new(100.0, 0.0, 3.0), None);
        assert_eq!(r.valid, 0);
        assert_eq!(r.feat, vec![0.0]);
        assert_eq!(s.sample(&Vec3::new(0.0, 0.0, -3.0), None).valid, 0);
    }

    #[test]
    fn bilinear_hand_expansion() {
        // Ramp f(u, v) = u + 10 v; sample at (1.5, 2.25).
        let (w, h) = (5, 5);
        let data: Vec<f64> = (0..h).flat_map(|v| (0..w).map(move |u| u as f64 + 10.0 * v as f64)).collect();
        let set = set_with(data, 1, w, h);
        let s = Sampler::new(&set, MotionMode::Ego).unwrap();
        // u = 4 x / z + 2 = 1.5, v = 4 y / z + 2 = 2.25 at z = 1.
        let r = s.sample(&Vec3::new(-0.125, 0.0625, 1.0), None);
        let f = |u: f64, v: f64| u + 10.0 * v;
        let hand = 0.5 * 0.75 * f(1.0, 2.0) + 0.5 * 0.75 * f(2.0, 2.0) + 0.5 * 0.25 * f(1.0, 3.0) + 0.5 * 0.25 * f(2.0, 3.0);
        assert!((r.feat[0] - hand).abs() < 1e-12);
        assert!((r.feat[0] - 24.0).abs() < 1e-12);
    }
}
