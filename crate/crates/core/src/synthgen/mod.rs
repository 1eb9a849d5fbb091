//! Synthetic surround-camera driving scenes: box primitives rasterized into
//! occupancy grids, ray-cast depth/semantic maps and derived feature planes.

mod packet;

pub use packet::{load_packet, save_packet, CameraView, Frame, FramePacket, PACKET_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OdgError, Result};
use crate::metrics::first_hit;
use crate::network::{FeaturePlane, FeaturePlaneSet};
use crate::scene::{
    extract_ground_truth, yaw_translation, BoxAttributes, BoxTarget, CameraModel, EgoPose, Vec3, VoxelGrid,
};

/// Pooling factor from camera pixels to feature-plane texels.
pub const FEATURE_POOL: usize = 4;
/// Tolerance on the point-in-box test, so faces through voxel centers are inclusive.
const INSIDE_EPS: f64 = 1e-9;

pub const CLASS_NAMES: [&str; 8] = ["road", "sidewalk", "building", "pole", "vegetation", "car", "terrain", "barrier"];
pub const ROAD: u8 = 0;
pub const SIDEWALK: u8 = 1;
pub const BUILDING: u8 = 2;
pub const POLE: u8 = 3;
pub const VEGETATION: u8 = 4;
pub const CAR: u8 = 5;
pub const TERRAIN: u8 = 6;
pub const BARRIER: u8 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub num_classes: u8,
}

/// A static oriented box: full extents `size`, yaw about +z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub center: Vec3,
    pub size: Vec3,
    #[serde(default)]
    pub yaw: f64,
    pub class: u8,
}

impl Primitive {
    pub fn contains(&self, p: &Vec3) -> bool {
        box_contains(&self.center, &self.size, self.yaw, p)
    }
}

/// A moving box. `center` is its position at the keyframe; it moves with the
/// constant planar velocity in `attrs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicBox {
    pub center: Vec3,
    pub attrs: BoxAttributes,
    pub class: u8,
}

impl DynamicBox {
    /// Center at time `t` (keyframe at `t = 0`).
    pub fn center_at(&self, t: f64) -> Vec3 {
        self.center + Vec3::new(self.attrs.vx * t, self.attrs.vy * t, 0.0)
    }

    fn size(&self) -> Vec3 {
        Vec3::new(self.attrs.l, self.attrs.w, self.attrs.h)
    }

    pub fn contains(&self, p: &Vec3, t: f64) -> bool {
        box_contains(&self.center_at(t), &self.size(), self.attrs.theta, p)
    }

    /// Corners of the box at time `t`.
    pub fn corners(&self, t: f64) -> Vec<Vec3> {
        let c = self.center_at(t);
        let (s, co) = self.attrs.theta.sin_cos();
        let h = self.size() / 2.0;
        let mut out = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let (lx, ly) = (sx * h.x, sy * h.y);
                    out.push(c + Vec3::new(co * lx - s * ly, s * lx + co * ly, sz * h.z));
                }
            }
        }
        out
    }
}

fn box_contains(center: &Vec3, size: &Vec3, yaw: f64, p: &Vec3) -> bool {
    let d = p - center;
    let (s, c) = yaw.sin_cos();
    let lx = c * d.x + s * d.y;
    let ly = -s * d.x + c * d.y;
    lx.abs() <= size.x / 2.0 + INSIDE_EPS && ly.abs() <= size.y / 2.0 + INSIDE_EPS && d.z.abs() <= size.z / 2.0 + INSIDE_EPS
}

/// A rig camera in ego coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigCamera {
    pub position: Vec3,
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
    pub hfov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl RigCamera {
    /// Camera-to-ego model.
    pub fn model(&self) -> CameraModel {
        CameraModel::looking(
            self.position,
            self.yaw_deg.to_radians(),
            self.pitch_deg.to_radians(),
            self.hfov_deg.to_radians(),
            self.width,
            self.height,
        )
    }
}

/// Full description of a synthetic sequence. Frame `i` of `frames` has timestamp
/// `(i − (frames − 1)) · frame_gap`, so the keyframe is the last frame at `t = 0`
/// and its ego frame is the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: GridSpec,
    pub statics: Vec<Primitive>,
    pub dynamics: Vec<DynamicBox>,
    pub rig: Vec<RigCamera>,
    pub frames: usize,
    pub frame_gap: f64,
    /// Constant planar ego velocity in world coordinates.
    pub ego_velocity: [f64; 2],
}

impl SceneSpec {
    pub fn timestamp(&self, frame: usize) -> f64 {
        (frame as f64 - (self.frames as f64 - 1.0)) * self.frame_gap
    }

    pub fn ego_pose(&self, frame: usize) -> EgoPose {
        let t = self.timestamp(frame);
        EgoPose {
            timestamp: t,
            pose: yaw_translation(0.0, Vec3::new(self.ego_velocity[0] * t, self.ego_velocity[1] * t, 0.0)),
        }
    }

    pub fn empty_grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::empty(self.grid.origin, self.grid.voxel_size, self.grid.dims, self.grid.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.num_classes == 0 || g.num_classes == u8::MAX {
            return Err(OdgError::config("grid.num_classes", "must be in 1..=254"));
        }
        if !(g.voxel_size > 0.0) {
            return Err(OdgError::config("grid.voxel_size", "must be positive"));
        }
        if g.dims.iter().any(|&d| d == 0) {
            return Err(OdgError::config("grid.dims", "every dimension must be nonzero"));
        }
        if self.frames == 0 {
            return Err(OdgError::config("frames", "at least one frame is required"));
        }
        if !(self.frame_gap > 0.0) {
            return Err(OdgError::config("frame_gap", "must be positive"));
        }
        if self.rig.is_empty() {
            return Err(OdgError::config("rig", "at least one camera is required"));
        }
        for (i, c) in self.rig.iter().enumerate() {
            if c.width < FEATURE_POOL * 2 || c.height < FEATURE_POOL * 2 {
                return Err(OdgError::config(format!("rig[{i}]"), format!("image must be at least {0}x{0}", FEATURE_POOL * 2)));
            }
            if !(c.hfov_deg > 0.0 && c.hfov_deg < 180.0) {
                return Err(OdgError::config(format!("rig[{i}].hfov_deg"), "must be in (0, 180)"));
            }
        }
        for (i, p) in self.statics.iter().enumerate() {
            if p.class >= g.num_classes {
                return Err(OdgError::config(format!("statics[{i}].class"), format!("{} is not below {}", p.class, g.num_classes)));
            }
            if p.size.iter().any(|&s| !(s > 0.0)) {
                return Err(OdgError::config(format!("statics[{i}].size"), "extents must be positive"));
            }
        }
        let lo = g.origin;
        let hi = g.origin + Vec3::new(g.dims[0] as f64, g.dims[1] as f64, g.dims[2] as f64) * g.voxel_size;
        for (i, b) in self.dynamics.iter().enumerate() {
            if b.class >= g.num_classes {
                return Err(OdgError::config(format!("dynamics[{i}].class"), format!("{} is not below {}", b.class, g.num_classes)));
            }
            b.attrs
                .validate()
                .map_err(|e| OdgError::config(format!("dynamics[{i}].attrs"), e.to_string()))?;
            for f in 0..self.frames {
                let t = self.timestamp(f);
                for c in b.corners(t) {
                    if (0..3).any(|a| c[a] < lo[a] - INSIDE_EPS || c[a] > hi[a] + INSIDE_EPS) {
                        return Err(OdgError::config(
                            format!("dynamics[{i}]"),
                            format!("box leaves the grid at frame {f} (t = {t})"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Street scene on the default 48x48x8 grid at 0.5 m: a road along x with
    /// sidewalks, terrain strips, building walls, poles, bushes, bollards, two
    /// cars moving at the same speed and one parked car. `seed` jitters object
    /// placement.
    pub fn street(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridSpec {
            origin: Vec3::new(-12.0, -12.0, -0.5),
            voxel_size: 0.5,
            dims: [48, 48, 8],
            num_classes: 8,
        };
        let ground = |y: f64, w: f64, class| Primitive {
            center: Vec3::new(0.0, y, -0.25),
            size: Vec3::new(24.0, w, 0.5),
            yaw: 0.0,
            class,
        };
        let mut statics = vec![
            ground(0.0, 6.0, ROAD),
            ground(3.5, 1.0, SIDEWALK),
            ground(-3.5, 1.0, SIDEWALK),
            ground(4.5, 1.0, TERRAIN),
            ground(-4.5, 1.0, TERRAIN),
        ];
        for side in [-1.0, 1.0] {
            // Two wall segments per side with a jittered gap between them.
            let gap_center: f64 = r.gen_range(-6.0..6.0);
            let gap = 3.0;
            let (a0, a1) = (-12.0, gap_center - gap / 2.0);
            let (b0, b1) = (gap_center + gap / 2.0, 12.0);
            for (x0, x1) in [(a0, a1), (b0, b1)] {
                statics.push(Primitive {
                    center: Vec3::new((x0 + x1) / 2.0, side * 5.25, 1.25),
                    size: Vec3::new(x1 - x0, 0.5, 2.5),
                    yaw: 0.0,
                    class: BUILDING,
                });
            }
            for k in 0..3 {
                let x = -8.0 + 8.0 * k as f64 + r.gen_range(-1.0..1.0);
                statics.push(Primitive {
                    center: Vec3::new(snap(x), side * 3.75, 1.25),
                    size: Vec3::new(0.5, 0.5, 2.5),
                    yaw: 0.0,
                    class: POLE,
                });
            }
            for _ in 0..2 {
                let x = r.gen_range(-10.0..10.0);
                statics.push(Primitive {
                    center: Vec3::new(snap(x) + 0.25, side * 4.5, 0.5),
                    size: Vec3::new(1.0, 1.0, 1.0),
                    yaw: 0.0,
                    class: VEGETATION,
                });
            }
            let x = r.gen_range(-10.0..10.0);
            statics.push(Primitive {
                center: Vec3::new(snap(x), side * 3.25, 0.25),
                size: Vec3::new(0.5, 0.5, 0.5),
                yaw: 0.0,
                class: BARRIER,
            });
        }
        let speed = 8.0 * r.gen_range(0.9..1.1);
        let car = |x: f64, y: f64, v: f64| DynamicBox {
            center: Vec3::new(x, y, 0.75),
            attrs: BoxAttributes {
                l: 4.0,
                w: 1.8,
                h: 1.5,
                theta: 0.0,
                vx: v,
                vy: 0.0,
            },
            class: CAR,
        };
        let dynamics = vec![
            car(3.0 + r.gen_range(-1.0..1.0), -1.75, speed),
            car(6.5 + r.gen_range(-1.0..1.0), 1.75, speed),
            car(-9.5, -1.75, 0.0),
        ];
        let rig = (0..6)
            .map(|k| RigCamera {
                position: Vec3::new(0.0, 0.0, 1.5),
                yaw_deg: 60.0 * k as f64,
                pitch_deg: 0.0,
                hfov_deg: 90.0,
                width: 128,
                height: 128,
            })
            .collect();
        Self {
            seed,
            grid,
            statics,
            dynamics,
            rig,
            frames: 3,
            frame_gap: 0.5,
            ego_velocity: [4.0, 0.0],
        }
    }

    /// The street scene with its cars replaced by four moving ones, two per lane
    /// in opposite directions at 7 to 9 m/s.
    pub fn moving_boxes(seed: u64) -> Self {
        let mut s = Self::street(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x6d0b);
        let car = |x: f64, y: f64, v: f64| DynamicBox {
            center: Vec3::new(x, y, 0.75),
            attrs: BoxAttributes {
                l: 4.0,
                w: 1.8,
                h: 1.5,
                theta: 0.0,
                vx: v,
                vy: 0.0,
            },
            class: CAR,
        };
        let (fwd, back) = (r.gen_range(7.0..9.0), -r.gen_range(7.0..9.0));
        let (a, b): (f64, f64) = (r.gen_range(-2.0..3.0), r.gen_range(-10.0..-5.0));
        s.dynamics = vec![
            car(a, -1.75, fwd),
            car(a + 6.0, -1.75, fwd),
            car(b, 1.75, back),
            car(b + 6.0, 1.75, back),
        ];
        s
    }

    /// A perturbed copy: static primitives (except full-length slabs) move by up
    /// to half a meter, moving boxes slide along their velocity by up to 2 m and
    /// share a velocity scale in [0.8, 1.2]. Falls back to an unperturbed copy
    /// when no valid perturbation is found.
    pub fn jittered(&self, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let extent = self.grid.dims[0].max(self.grid.dims[1]) as f64 * self.grid.voxel_size;
        for _ in 0..20 {
            let mut s = self.clone();
            s.seed = seed;
            for p in &mut s.statics {
                if p.size.x.max(p.size.y) < extent * 0.9 {
                    p.center.x += r.gen_range(-0.5..0.5);
                    p.center.y += r.gen_range(-0.5..0.5);
                }
            }
            let scale = r.gen_range(0.8..1.2);
            for b in &mut s.dynamics {
                let v = Vec3::new(b.attrs.vx, b.attrs.vy, 0.0);
                let dir = if v.norm() > 0.0 { v.normalize() } else { Vec3::x() };
                b.center += dir * r.gen_range(-2.0..2.0);
                b.attrs.vx *= scale;
                b.attrs.vy *= scale;
            }
            if s.validate().is_ok() {
                return s;
            }
        }
        self.clone()
    }
}

fn snap(x: f64) -> f64 {
    (x * 2.0).round() / 2.0 + 0.25
}

/// Voxels whose centers fall inside a primitive at time `t` (keyframe `t = 0`).
/// Static primitives are drawn first, then moving boxes; later ones override.
pub fn rasterize_primitives(spec: &SceneSpec, t: f64) -> Result<VoxelGrid> {
    let mut grid = spec.empty_grid()?;
    let [nx, ny, nz] = grid.dims;
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let c = grid.center_unchecked([i, j, k]);
                let mut label = grid.free_label;
                for p in &spec.statics {
                    if p.contains(&c) {
                        label = p.class;
                    }
                }
                for b in &spec.dynamics {
                    if b.contains(&c, t) {
                        label = b.class;
                    }
                }
                grid.labels[(i * ny + j) * nz + k] = label;
            }
        }
    }
    Ok(grid)
}

/// Ray-cast camera-z depth (0 on a miss) and class (`free_label` on a miss) per pixel.
pub fn cast_view(grid: &VoxelGrid, cam: &CameraModel) -> CameraView {
    let forward: Vec3 = cam.cam_to_world.fixed_view::<3, 1>(0, 2).into_owned();
    let origin = cam.center();
    let rows: Vec<(Vec<f32>, Vec<u8>)> = (0..cam.height)
        .into_par_iter()
        .map(|v| {
            let mut depth = Vec::with_capacity(cam.width);
            let mut sem = Vec::with_capacity(cam.width);
            for u in 0..cam.width {
                let d = cam.pixel_ray(u as f64, v as f64);
                match first_hit(&origin, &d, grid) {
                    Some((_, class, t)) if t > 0.0 => {
                        depth.push((t * d.dot(&forward)) as f32);
                        sem.push(class);
                    }
                    _ => {
                        depth.push(0.0);
                        sem.push(grid.free_label);
                    }
                }
            }
            (depth, sem)
        })
        .collect();
    let mut out = CameraView {
        depth: Vec::with_capacity(cam.width * cam.height),
        sem: Vec::with_capacity(cam.width * cam.height),
    };
    for (d, s) in rows {
        out.depth.extend(d);
        out.sem.extend(s);
    }
    out
}

pub fn generate_scene(spec: &SceneSpec) -> Result<FramePacket> {
    spec.validate()?;
    let cameras: Vec<CameraModel> = spec.rig.iter().map(RigCamera::model).collect();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut key_grid = None;
    for f in 0..spec.frames {
        let pose = spec.ego_pose(f);
        let grid = rasterize_primitives(spec, pose.timestamp)?;
        let views = cameras.iter().map(|c| cast_view(&grid, &c.transformed(&pose.pose))).collect();
        frames.push(Frame { pose, views });
        if f + 1 == spec.frames {
            key_grid = Some(grid);
        }
    }
    let grid = key_grid.expect("at least one frame");
    let boxes = spec
        .dynamics
        .iter()
        .map(|b| BoxTarget {
            center: b.center,
            attrs: b.attrs,
            class: b.class as usize,
        })
        .collect();
    Ok(FramePacket {
        spec: spec.clone(),
        gt: extract_ground_truth(&grid),
        grid,
        cameras,
        frames,
        boxes,
    })
}

/// Per-camera planes for one frame: `C` one-hot class channels plus inverse
/// depth, each averaged over `FEATURE_POOL × FEATURE_POOL` pixel blocks, with
/// miss pixels contributing zero.
pub fn build_feature_planes(packet: &FramePacket, frame: usize) -> Result<Vec<FeaturePlane>> {
    let f = packet
        .frames
        .get(frame)
        .ok_or_else(|| OdgError::InvalidArgument(format!("frame {frame} out of {}", packet.frames.len())))?;
    let c = packet.num_classes();
    let channels = c + 1;
    let mut out = Vec::with_capacity(packet.cameras.len());
    for (cam, view) in packet.cameras.iter().zip(&f.views) {
        let pc = cam.pooled(FEATURE_POOL);
        let (w, h) = (pc.width, pc.height);
        let mut data = vec![0.0; w * h * channels];
        let norm = 1.0 / (FEATURE_POOL * FEATURE_POOL) as f64;
        for bv in 0..h {
            for bu in 0..w {
                let cell = &mut data[(bv * w + bu) * channels..(bv * w + bu + 1) * channels];
                for dv in 0..FEATURE_POOL {
                    for du in 0..FEATURE_POOL {
                        let pix = (bv * FEATURE_POOL + dv) * cam.width + bu * FEATURE_POOL + du;
                        let d = view.depth[pix];
                        if d > 0.0 {
                            cell[view.sem[pix] as usize] += norm;
                            cell[c] += norm / d as f64;
                        }
                    }
                }
            }
        }
        out.push(FeaturePlane {
            frame,
            camera: pc,
            channels,
            data,
        });
    }
    Ok(out)
}

/// Planes of every frame, referenced to the keyframe.
pub fn packet_feature_planes(packet: &FramePacket) -> Result<FeaturePlaneSet> {
    let mut planes = Vec::new();
    for f in 0..packet.frames.len() {
        planes.extend(build_feature_planes(packet, f)?);
    }
    Ok(FeaturePlaneSet {
        channels: packet.num_classes() + 1,
        reference: packet.keyframe().pose.clone(),
        frames: packet.frames.iter().map(|f| f.pose.clone()).collect(),
        planes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SceneSpec {
        SceneSpec {
            seed: 0,
            grid: GridSpec {
                origin: Vec3::new(0.0, -2.0, 0.0),
                voxel_size: 0.5,
                dims: [16, 8, 4],
                num_classes: 3,
            },
            statics: vec![],
            dynamics: vec![],
            rig: vec![RigCamera {
                position: Vec3::new(0.0, 0.0, 1.0),
                yaw_deg: 0.0,
                pitch_deg: 0.0,
                hfov_deg: 90.0,
                width: 16,
                height: 16,
            }],
            frames: 2,
            frame_gap: 0.5,
            ego_velocity: [0.0, 0.0],
        }
    }

    #[test]
    fn slab_covers_four_centers() {
        let mut s = tiny_spec();
        s.statics.push(Primitive {
            center: Vec3::new(1.0, 0.0, 0.25),
            size: Vec3::new(1.0, 1.0, 0.5),
            yaw: 0.0,
            class: 1,
        });
        let g = rasterize_primitives(&s, 0.0).unwrap();
        assert_eq!(g.occupied_count(), 4);
    }

    #[test]
    fn later_primitive_wins() {
        let mut s = tiny_spec();
        for class in [1, 2] {
            s.statics.push(Primitive {
                center: Vec3::new(1.25, 0.25, 0.25),
                size: Vec3::new(0.5, 0.5, 0.5),
                yaw: 0.0,
                class,
            });
        }
        let g = rasterize_primitives(&s, 0.0).unwrap();
        assert_eq!(g.get([2, 4, 0]), 2);
        assert_eq!(g.occupied_count(), 1);
    }

    #[test]
    fn empty_scene_misses_everywhere() {
        let p = generate_scene(&tiny_spec()).unwrap();
        assert_eq!(p.grid.occupied_count(), 0);
        assert!(p.frames.iter().all(|f| f.views.iter().all(|v| v.depth.iter().all(|&d| d == 0.0))));
        let planes = build_feature_planes(&p, 1).unwrap();
        assert!(planes[0].data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn box_leaving_grid_rejected() {
        let mut s = tiny_spec();
        s.dynamics.push(DynamicBox {
            center: Vec3::new(1.5, 0.0, 0.75),
            attrs: BoxAttributes {
                vx: 4.0,
                ..BoxAttributes::default()
            },
            class: 0,
        });
        s.dynamics[0].attrs.l = 2.0;
        s.dynamics[0].attrs.w = 1.0;
        // At t = −0.5 the box is centered at x = −0.5 and pokes out of x ≥ 0.
        assert!(matches!(s.validate(), Err(OdgError::Config { .. })));
    }

    #[test]
    fn street_is_valid() {
        for seed in 0..5 {
            let s = SceneSpec::street(seed);
            s.validate().unwrap();
            s.jittered(seed + 100).validate().unwrap();
            let m = SceneSpec::moving_boxes(seed);
            m.validate().unwrap();
            assert!(m.dynamics.iter().all(|b| b.attrs.vx.abs() >= 7.0));
        }
    }
}
