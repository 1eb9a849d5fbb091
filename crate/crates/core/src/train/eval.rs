//! Turning fitted Gaussians into occupancy grids and scoring them.

use crate::error::{OdgError, Result};
use crate::metrics::{
    compute_visibility_mask, evaluate, make_ray_bundle, MetricReport, RayBundle, DEFAULT_AZIMUTH_STEPS,
    DEFAULT_CHANNELS,
};
use crate::render::{render_view_with, RenderOptions};
use crate::scene::{points_to_grid, Gaussian3D, VoxelGrid};
use crate::synthgen::FramePacket;

/// Margin (meters) added around object boxes for box-region scores.
pub const BOX_REGION_MARGIN: f64 = 0.5;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Votes Gaussian means into `template`'s geometry with their argmax class,
/// opacity as confidence.
pub fn predict_grid(gaussians: &[Gaussian3D], template: &VoxelGrid) -> Result<VoxelGrid> {
    let means: Vec<_> = gaussians.iter().map(|g| g.mean).collect();
    let classes: Vec<u8> = gaussians.iter().map(|g| argmax(&g.sem) as u8).collect();
    let conf: Vec<f64> = gaussians.iter().map(|g| g.opacity).collect();
    Ok(points_to_grid(&means, &classes, &conf, template)?.0)
}

/// Voxels seen by the keyframe cameras.
pub fn keyframe_visibility(packet: &FramePacket) -> Result<Vec<bool>> {
    let cams: Vec<_> = (0..packet.cameras.len())
        .map(|c| packet.world_camera(packet.key_index(), c))
        .collect();
    compute_visibility_mask(&packet.grid, &cams)
}

/// LiDAR-style rays from every frame's ego pose.
pub fn eval_rays(packet: &FramePacket) -> Result<RayBundle> {
    let poses: Vec<_> = packet.frames.iter().map(|f| f.pose.clone()).collect();
    make_ray_bundle(&poses, DEFAULT_CHANNELS, DEFAULT_AZIMUTH_STEPS)
}

/// Full metric report of `gaussians` against the packet's ground truth.
pub fn evaluate_stage(packet: &FramePacket, gaussians: &[Gaussian3D]) -> Result<MetricReport> {
    let pred = predict_grid(gaussians, &packet.grid)?;
    let mask = keyframe_visibility(packet)?;
    evaluate(&pred, &packet.grid, Some(&mask), &eval_rays(packet)?)
}

/// Mean absolute error of the normalized rendered depth over valid keyframe
/// pixels at `stride`-subsampled resolution.
pub fn depth_l1(gaussians: &[Gaussian3D], packet: &FramePacket, stride: usize) -> Result<f64> {
    let opts = RenderOptions::default();
    let (mut sum, mut n) = (0.0, 0usize);
    for (cam, t) in packet.key_cameras(stride).iter().zip(packet.key_targets(stride)) {
        let r = render_view_with(gaussians, cam, &opts)?;
        for pix in 0..t.depth.len() {
            if t.valid[pix] {
                sum += (r.depth_norm[pix] - t.depth[pix]).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(OdgError::InvalidArgument("no valid pixels for depth error".into()));
    }
    Ok(sum / n as f64)
}

/// Voxels whose centers lie inside an annotated box grown by `margin` meters
/// on every side, restricted to those visible from the keyframe.
pub fn box_region_mask(packet: &FramePacket, margin: f64) -> Result<Vec<bool>> {
    let vis = keyframe_visibility(packet)?;
    let g = &packet.grid;
    let mut mask = vec![false; g.len()];
    for (n, m) in mask.iter_mut().enumerate() {
        if !vis[n] {
            continue;
        }
        let p = g.grid_to_world(g.unlinear(n))?;
        *m = packet.boxes.iter().any(|b| {
            let d = p - b.center;
            let (s, c) = b.attrs.theta.sin_cos();
            let (lx, ly) = (c * d.x + s * d.y, -s * d.x + c * d.y);
            lx.abs() <= b.attrs.l / 2.0 + margin
                && ly.abs() <= b.attrs.w / 2.0 + margin
                && d.z.abs() <= b.attrs.h / 2.0 + margin
        });
    }
    Ok(mask)
}
