//! Occupancy evaluation: per-class IoU, voxel ray traversal, ray-based IoU and
//! camera visibility masks.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OdgError, Result};
use crate::scene::{CameraModel, EgoPose, Vec3, VoxelGrid};

/// Distance thresholds (meters) of the thresholded ray IoU.
pub const RAY_THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];
/// Height of the emulated LiDAR above the ego origin.
pub const LIDAR_HEIGHT: f64 = 1.8;
/// Elevation range of the emulated LiDAR, degrees.
pub const ELEVATION_RANGE: (f64, f64) = (-30.0, 10.0);
/// Default beam pattern.
pub const DEFAULT_CHANNELS: usize = 32;
pub const DEFAULT_AZIMUTH_STEPS: usize = 360;
/// Pixel subsampling factor of the visibility mask; pixel `(s·i + s/2, s·j + s/2)`
/// is cast for every block.
pub const VISIBILITY_STRIDE: usize = 4;

/// Per-class IoU over masked voxels. Classes absent from both grids are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub evaluated_voxels: usize,
}

pub fn miou(pred: &VoxelGrid, gt: &VoxelGrid, mask: Option<&[bool]>) -> Result<IouReport> {
    gt.check_geometry(pred)?;
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(OdgError::GeometryMismatch(format!(
                "mask has {} entries for {} voxels",
                m.len(),
                gt.len()
            )));
        }
    }
    let c = gt.num_classes();
    let mut inter = vec![0usize; c];
    let mut union = vec![0usize; c];
    let mut evaluated = 0;
    for n in 0..gt.len() {
        if mask.is_some_and(|m| !m[n]) {
            continue;
        }
        evaluated += 1;
        let (p, g) = (pred.labels[n] as usize, gt.labels[n] as usize);
        if p == g {
            if p < c {
                inter[p] += 1;
                union[p] += 1;
            }
        } else {
            if p < c {
                union[p] += 1;
            }
            if g < c {
                union[g] += 1;
            }
        }
    }
    let per_class_iou: Vec<Option<f64>> = (0..c)
        .map(|k| (union[k] > 0).then(|| inter[k] as f64 / union[k] as f64))
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IouReport {
        per_class_iou,
        miou,
        evaluated_voxels: evaluated,
    })
}

/// A voxel crossed by a ray and the ray parameter where it is entered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelHit {
    pub index: [usize; 3],
    pub t_entry: f64,
}

/// Parameter interval `[t0, t1]` (with `t0 ≥ 0`) where the ray is inside the grid box.
pub fn clip_to_grid(origin: &Vec3, dir: &Vec3, grid: &VoxelGrid) -> Option<(f64, f64)> {
    let lo = grid.origin;
    let hi = grid.max_corner();
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

/// Incremental grid walk. Calls `visit` for each crossed voxel in order; stops
/// early when `visit` returns `false`.
pub fn walk_ray<F: FnMut(VoxelHit) -> bool>(origin: &Vec3, dir: &Vec3, grid: &VoxelGrid, mut visit: F) {
    let Some((t0, t1)) = clip_to_grid(origin, dir, grid) else {
        return;
    };
    let vs = grid.voxel_size;
    let start = origin + dir * t0;
    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let rel = (start[a] - grid.origin[a]) / vs;
        let mut i = rel.floor() as isize;
        let n = grid.dims[a] as isize;
        i = i.clamp(0, n - 1);
        // Sitting exactly on a cell face while moving down the axis means the
        // ray is already in the lower cell.
        if dir[a] < 0.0 && rel == i as f64 && i > 0 {
            i -= 1;
        }
        idx[a] = i;
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = grid.origin[a] + (i + 1) as f64 * vs;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = vs / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = grid.origin[a] + i as f64 * vs;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = -vs / dir[a];
        }
    }
    let mut t_entry = t0;
    loop {
        let hit = VoxelHit {
            index: [idx[0] as usize, idx[1] as usize, idx[2] as usize],
            t_entry,
        };
        if !visit(hit) {
            return;
        }
        let mut a = 0;
        if t_max[1] < t_max[a] {
            a = 1;
        }
        if t_max[2] < t_max[a] {
            a = 2;
        }
        if t_max[a] >= t1 {
            return;
        }
        t_entry = t_max[a];
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= grid.dims[a] as isize {
            return;
        }
        t_max[a] += t_delta[a];
    }
}

/// Every voxel crossed by the ray, in order of entry distance.
pub fn traverse_ray(origin: &Vec3, dir: &Vec3, grid: &VoxelGrid) -> Vec<VoxelHit> {
    let mut out = Vec::new();
    walk_ray(origin, dir, grid, |h| {
        out.push(h);
        true
    });
    out
}

/// First occupied voxel along the ray: `(linear index, class, entry distance)`.
pub fn first_hit(origin: &Vec3, dir: &Vec3, grid: &VoxelGrid) -> Option<(usize, u8, f64)> {
    let mut found = None;
    walk_ray(origin, dir, grid, |h| {
        let n = grid.linear(h.index);
        let label = grid.labels[n];
        if label != grid.free_label {
            found = Some((n, label, h.t_entry));
            false
        } else {
            true
        }
    });
    found
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RayBundle {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    /// Index of the pose each ray was cast from.
    pub source: Vec<usize>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn push(&mut self, origin: Vec3, dir: Vec3, source: usize) {
        self.origins.push(origin);
        self.directions.push(dir);
        self.source.push(source);
    }
}

/// Spinning-LiDAR pattern: `azimuth_steps` uniform azimuths times `channels`
/// uniform elevations in [−30°, +10°] (a single channel sits at the middle),
/// cast from `LIDAR_HEIGHT` above each ego origin and rotated with the ego pose.
pub fn make_ray_bundle(poses: &[EgoPose], channels: usize, azimuth_steps: usize) -> Result<RayBundle> {
    if poses.is_empty() {
        return Err(OdgError::InvalidArgument("ray bundle needs at least one pose".into()));
    }
    if channels == 0 || azimuth_steps == 0 {
        return Err(OdgError::InvalidArgument("ray bundle needs channels and azimuth steps".into()));
    }
    let (e0, e1) = ELEVATION_RANGE;
    let elevations: Vec<f64> = (0..channels)
        .map(|c| {
            let f = if channels == 1 { 0.5 } else { c as f64 / (channels - 1) as f64 };
            (e0 + f * (e1 - e0)).to_radians()
        })
        .collect();
    let mut out = RayBundle::default();
    for (k, pose) in poses.iter().enumerate() {
        pose.validate()?;
        let rot = pose.pose.fixed_view::<3, 3>(0, 0).into_owned();
        let origin = crate::scene::transform_point(&pose.pose, &Vec3::new(0.0, 0.0, LIDAR_HEIGHT));
        for s in 0..azimuth_steps {
            let az = std::f64::consts::TAU * s as f64 / azimuth_steps as f64;
            for &el in &elevations {
                let d = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                out.push(origin, (rot * d).normalize(), k);
            }
        }
    }
    Ok(out)
}

type RayHits = Vec<(Option<(usize, u8, f64)>, Option<(usize, u8, f64)>)>;

fn ray_hits(pred: &VoxelGrid, gt: &VoxelGrid, rays: &RayBundle) -> Result<RayHits> {
    gt.check_geometry(pred)?;
    Ok((0..rays.len())
        .into_par_iter()
        .map(|r| {
            let (o, d) = (&rays.origins[r], &rays.directions[r]);
            (first_hit(o, d, pred), first_hit(o, d, gt))
        })
        .collect())
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `Σ_r |P_r ∩ G_r| / Σ_r |P_r ∪ G_r|` where each ray's set holds its first
/// occupied `(voxel, class)`.
pub fn rayiou_set(pred: &VoxelGrid, gt: &VoxelGrid, rays: &RayBundle) -> Result<f64> {
    let hits = ray_hits(pred, gt, rays)?;
    Ok(set_score(&hits))
}

fn set_score(hits: &RayHits) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for (p, g) in hits {
        match (p, g) {
            (Some((pv, pc, _)), Some((gv, gc, _))) if pv == gv && pc == gc => {
                inter += 1;
                union += 1;
            }
            (Some(_), Some(_)) => union += 2,
            (Some(_), None) | (None, Some(_)) => union += 1,
            (None, None) => {}
        }
    }
    ratio(inter, union)
}

fn threshold_score(hits: &RayHits, tau: f64) -> f64 {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in hits {
        np += p.is_some() as usize;
        ng += g.is_some() as usize;
        if let (Some((_, pc, pd)), Some((_, gc, gd))) = (p, g) {
            if pc == gc && (pd - gd).abs() <= tau {
                tp += 1;
            }
        }
    }
    ratio(tp, np + ng - tp)
}

/// First-hit agreement within `tau` meters: `TP / (pred hits + gt hits − TP)`.
pub fn rayiou_threshold(pred: &VoxelGrid, gt: &VoxelGrid, rays: &RayBundle, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(OdgError::InvalidArgument(format!("threshold must be positive, got {tau}")));
    }
    let hits = ray_hits(pred, gt, rays)?;
    Ok(threshold_score(&hits, tau))
}

/// Voxels seen by at least one camera: for every `VISIBILITY_STRIDE`-subsampled
/// pixel, the traversed voxels up to and including the first occupied one.
pub fn compute_visibility_mask(gt: &VoxelGrid, cams: &[CameraModel]) -> Result<Vec<bool>> {
    let mut mask = vec![false; gt.len()];
    let half = VISIBILITY_STRIDE / 2;
    for cam in cams {
        cam.validate()?;
        let o = cam.center();
        let per_row: Vec<Vec<usize>> = (0..cam.height.div_ceil(VISIBILITY_STRIDE))
            .into_par_iter()
            .map(|i| {
                let mut seen = Vec::new();
                let v = i * VISIBILITY_STRIDE + half;
                for u in (half..cam.width).step_by(VISIBILITY_STRIDE) {
                    if v >= cam.height {
                        break;
                    }
                    let d = cam.pixel_ray(u as f64, v as f64);
                    walk_ray(&o, &d, gt, |h| {
                        let n = gt.linear(h.index);
                        seen.push(n);
                        gt.labels[n] == gt.free_label
                    });
                }
                seen
            })
            .collect();
        for n in per_row.into_iter().flatten() {
            mask[n] = true;
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub rayiou_set: f64,
    /// Keyed by threshold in meters, e.g. `"1m"`.
    pub rayiou_at: BTreeMap<String, f64>,
    /// Mean of `rayiou_at`.
    pub rayiou: f64,
    pub num_rays: usize,
    pub evaluated_voxels: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}

/// Full report: masked mIoU plus both ray IoU variants.
pub fn evaluate(pred: &VoxelGrid, gt: &VoxelGrid, mask: Option<&[bool]>, rays: &RayBundle) -> Result<MetricReport> {
    let iou = miou(pred, gt, mask)?;
    let hits = ray_hits(pred, gt, rays)?;
    let rayiou_at: BTreeMap<String, f64> = RAY_THRESHOLDS
        .iter()
        .map(|&t| (format!("{t}m"), threshold_score(&hits, t)))
        .collect();
    let rayiou = rayiou_at.values().sum::<f64>() / rayiou_at.len() as f64;
    Ok(MetricReport {
        per_class_iou: iou.per_class_iou,
        miou: iou.miou,
        rayiou_set: set_score(&hits),
        rayiou_at,
        rayiou,
        num_rays: rays.len(),
        evaluated_voxels: iou.evaluated_voxels,
    })
}
