mod common;

use std::collections::BTreeSet;

use common::rng;
use odg_core::metrics::{
    clip_to_grid, compute_visibility_mask, evaluate, make_ray_bundle, miou, rayiou_set, rayiou_threshold,
    traverse_ray, RayBundle, VISIBILITY_STRIDE,
};
use odg_core::scene::{CameraModel, EgoPose, Vec3, VoxelGrid};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const FREE: u8 = 5;

fn empty(dims: [usize; 3], vs: f64) -> VoxelGrid {
    VoxelGrid::empty(Vec3::new(-1.0, -2.0, -0.5), vs, dims, FREE).unwrap()
}

fn random_grid(r: &mut ChaCha8Rng, dims: [usize; 3], fill: f64) -> VoxelGrid {
    let mut g = empty(dims, 0.5);
    for l in g.labels.iter_mut() {
        if r.gen_bool(fill) {
            *l = r.gen_range(0..FREE);
        }
    }
    g
}

fn random_dir(r: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            return v.normalize();
        }
    }
}

#[test]
fn miou_matches_brute_force_count() {
    let mut r = rng(1);
    for _ in 0..10 {
        let a = random_grid(&mut r, [8, 8, 8], 0.4);
        let b = random_grid(&mut r, [8, 8, 8], 0.4);
        let mask: Vec<bool> = (0..512).map(|_| r.gen_bool(0.8)).collect();
        let rep = miou(&a, &b, Some(&mask)).unwrap();
        let mut ious = Vec::new();
        for c in 0..FREE {
            let (mut i, mut u) = (0, 0);
            for x in 0..8 {
                for y in 0..8 {
                    for z in 0..8 {
                        let n = (x * 8 + y) * 8 + z;
                        if !mask[n] {
                            continue;
                        }
                        let (pa, pb) = (a.get([x, y, z]) == c, b.get([x, y, z]) == c);
                        i += (pa && pb) as usize;
                        u += (pa || pb) as usize;
                    }
                }
            }
            if u > 0 {
                ious.push(i as f64 / u as f64);
            }
        }
        let expect = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((rep.miou - expect).abs() < 1e-12);
    }
}

#[test]
fn miou_rejects_geometry_mismatch() {
    let a = empty([4, 4, 4], 0.5);
    let b = empty([4, 4, 2], 0.5);
    assert!(miou(&a, &b, None).is_err());
}

/// Voxel set of a finely sampled ray, plus each traversed voxel's chord length.
fn dense_voxels(o: &Vec3, d: &Vec3, g: &VoxelGrid, step: f64) -> BTreeSet<[usize; 3]> {
    let mut out = BTreeSet::new();
    if let Some((t0, t1)) = clip_to_grid(o, d, g) {
        let mut t = t0 + step * 0.5;
        while t < t1 {
            if let Some(idx) = g.world_to_grid(&(o + d * t)) {
                out.insert(idx);
            }
            t += step;
        }
    }
    out
}

#[test]
fn traversal_matches_dense_sampling() {
    let mut r = rng(2);
    let g = empty([10, 12, 6], 0.5);
    let step = g.voxel_size / 50.0;
    let mut total = 0;
    for _ in 0..100 {
        let o = Vec3::new(r.gen_range(-4.0..8.0), r.gen_range(-5.0..7.0), r.gen_range(-2.0..4.0));
        let d = random_dir(&mut r);
        let hits = traverse_ray(&o, &d, &g);
        let walked: BTreeSet<_> = hits.iter().map(|h| h.index).collect();
        assert_eq!(walked.len(), hits.len(), "a voxel was visited twice");
        let dense = dense_voxels(&o, &d, &g, step);
        // Sampling can only miss voxels whose chord is shorter than one step.
        assert!(dense.is_subset(&walked));
        let (_, t1) = clip_to_grid(&o, &d, &g).unwrap_or((0.0, 0.0));
        for (k, h) in hits.iter().enumerate() {
            let exit = hits.get(k + 1).map_or(t1, |n| n.t_entry);
            if exit - h.t_entry > step {
                assert!(dense.contains(&h.index), "missed {:?}", h.index);
            }
        }
        total += hits.len();
    }
    assert!(total > 100);
}

proptest! {
    #[test]
    fn traversal_steps_are_single_axis_and_increasing(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let g = empty([9, 7, 5], 0.4);
        let o = Vec3::new(r.gen_range(-3.0..6.0), r.gen_range(-4.0..3.0), r.gen_range(-2.0..3.0));
        let d = random_dir(&mut r);
        let hits = traverse_ray(&o, &d, &g);
        for w in hits.windows(2) {
            prop_assert!(w[1].t_entry > w[0].t_entry);
            let diff: usize = (0..3).map(|a| w[0].index[a].abs_diff(w[1].index[a])).sum();
            prop_assert_eq!(diff, 1);
        }
    }

    #[test]
    fn self_comparison_is_perfect(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let mut g = random_grid(&mut r, [12, 12, 4], 0.1);
        g.set([0, 0, 0], 1);
        let rays = make_ray_bundle(&[EgoPose { timestamp: 0.0, pose: nalgebra::Matrix4::new_translation(&Vec3::new(2.0, 1.0, -1.0)) }], 4, 36).unwrap();
        prop_assert_eq!(miou(&g, &g, None).unwrap().miou, 1.0);
        prop_assert_eq!(rayiou_set(&g, &g, &rays).unwrap(), 1.0);
        for tau in [1.0, 2.0, 4.0] {
            prop_assert_eq!(rayiou_threshold(&g, &g, &rays, tau).unwrap(), 1.0);
        }
    }

    #[test]
    fn metrics_are_bounded(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = random_grid(&mut r, [8, 8, 4], 0.15);
        let b = random_grid(&mut r, [8, 8, 4], 0.15);
        let rays = make_ray_bundle(&[EgoPose::identity(0.0)], 4, 24).unwrap();
        let rep = evaluate(&a, &b, None, &rays).unwrap();
        for v in [rep.miou, rep.rayiou_set, rep.rayiou].into_iter().chain(rep.rayiou_at.values().copied()) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

fn axis_rays(ys: &[f64], z: f64) -> RayBundle {
    let mut b = RayBundle::default();
    for &y in ys {
        b.push(Vec3::new(-1.0, y, z), Vec3::x(), 0);
    }
    b
}

#[test]
fn rayiou_set_hand_scene() {
    let mut gt = VoxelGrid::empty(Vec3::zeros(), 1.0, [4, 4, 1], FREE).unwrap();
    gt.set([2, 0, 0], 1);
    gt.set([2, 2, 0], 2);
    gt.set([3, 2, 0], 2);
    let mut pred = VoxelGrid::empty(Vec3::zeros(), 1.0, [4, 4, 1], FREE).unwrap();
    pred.set([2, 0, 0], 1);
    pred.set([3, 2, 0], 2);
    let rays = axis_rays(&[0.5, 2.5], 0.5);
    // Ray 1 agrees; ray 2 hits (2,2) in gt and (3,2) in pred: 1 / (1 + 2).
    assert!((rayiou_set(&pred, &gt, &rays).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    let free = VoxelGrid::empty(Vec3::zeros(), 1.0, [4, 4, 1], FREE).unwrap();
    assert_eq!(rayiou_set(&free, &gt, &rays).unwrap(), 0.0);
    assert_eq!(rayiou_threshold(&free, &gt, &rays, 2.0).unwrap(), 0.0);
}

fn wall(x: usize) -> VoxelGrid {
    let mut g = VoxelGrid::empty(Vec3::zeros(), 0.5, [16, 8, 2], FREE).unwrap();
    for y in 0..8 {
        for z in 0..2 {
            g.set([x, y, z], 3);
        }
    }
    g
}

#[test]
fn threshold_with_uniform_depth_error() {
    let gt = wall(3);
    let pred = wall(6);
    let ys: Vec<f64> = (0..8).map(|j| j as f64 * 0.5 + 0.25).collect();
    let rays = axis_rays(&ys, 0.3);
    assert_eq!(rayiou_threshold(&pred, &gt, &rays, 1.0).unwrap(), 0.0);
    assert_eq!(rayiou_threshold(&pred, &gt, &rays, 2.0).unwrap(), 1.0);
    assert_eq!(rayiou_threshold(&pred, &gt, &rays, 4.0).unwrap(), 1.0);
    assert!(rayiou_threshold(&pred, &gt, &rays, 0.0).is_err());
}

#[test]
fn ray_scores_do_not_increase_with_depth_noise() {
    let gt = wall(3);
    let ys: Vec<f64> = (0..8).map(|j| j as f64 * 0.5 + 0.25).collect();
    let rays = axis_rays(&ys, 0.3);
    let mut pred = gt.clone();
    let mut last = (rayiou_set(&pred, &gt, &rays).unwrap(), rayiou_threshold(&pred, &gt, &rays, 1.0).unwrap());
    for y in 0..8 {
        // Push one row of the predicted wall 2.5 m back, beyond the 1 m threshold.
        for z in 0..2 {
            pred.set([3, y, z], FREE);
            pred.set([8, y, z], 3);
        }
        let cur = (rayiou_set(&pred, &gt, &rays).unwrap(), rayiou_threshold(&pred, &gt, &rays, 1.0).unwrap());
        assert!(cur.0 <= last.0 && cur.1 <= last.1);
        last = cur;
    }
    assert_eq!(last, (0.0, 0.0));
}

#[test]
fn ray_bundle_shape() {
    let poses = [EgoPose::identity(0.0), EgoPose::identity(0.5), EgoPose::identity(1.0)];
    let b = make_ray_bundle(&poses, 8, 90).unwrap();
    assert_eq!(b.len(), 3 * 8 * 90);
    assert!(b.directions.iter().all(|d| (d.norm() - 1.0).abs() < 1e-6));
    assert!(make_ray_bundle(&[], 8, 90).is_err());
}

fn front_camera() -> CameraModel {
    CameraModel::looking(Vec3::new(0.0, 2.0, 1.0), 0.0, 0.0, 90f64.to_radians(), 32, 32)
}

#[test]
fn empty_grid_visibility_covers_frustum_rays() {
    let g = VoxelGrid::empty(Vec3::new(0.0, 0.0, 0.0), 0.5, [16, 8, 4], FREE).unwrap();
    let cam = front_camera();
    let mask = compute_visibility_mask(&g, &[cam.clone()]).unwrap();
    let h = VISIBILITY_STRIDE / 2;
    for v in (h..32).step_by(VISIBILITY_STRIDE) {
        for u in (h..32).step_by(VISIBILITY_STRIDE) {
            for hit in traverse_ray(&cam.center(), &cam.pixel_ray(u as f64, v as f64), &g) {
                assert!(mask[g.linear(hit.index)]);
            }
        }
    }
    // Voxels behind the camera are never seen.
    assert!(!mask.iter().all(|&m| m));
}

#[test]
fn wall_occludes_voxels_behind_it() {
    let mut g = VoxelGrid::empty(Vec3::new(0.0, 0.0, 0.0), 0.5, [16, 8, 4], FREE).unwrap();
    for y in 0..8 {
        for z in 0..4 {
            g.set([6, y, z], 2);
        }
    }
    let mask = compute_visibility_mask(&g, &[front_camera()]).unwrap();
    for x in 7..16 {
        for y in 0..8 {
            for z in 0..4 {
                assert!(!mask[g.linear([x, y, z])], "voxel behind the wall marked visible");
            }
        }
    }
    assert!((0..8).any(|y| mask[g.linear([6, y, 2])]));
}

#[test]
fn visibility_matches_dense_oracle() {
    let mut r = rng(3);
    let mut g = VoxelGrid::empty(Vec3::new(0.0, -2.0, 0.0), 0.5, [20, 12, 4], FREE).unwrap();
    for l in g.labels.iter_mut() {
        if r.gen_bool(0.05) {
            *l = r.gen_range(0..FREE);
        }
    }
    let cam = CameraModel::looking(Vec3::new(0.1, 0.9, 1.1), 0.05, 0.1, 90f64.to_radians(), 64, 64);
    let mask = compute_visibility_mask(&g, &[cam.clone()]).unwrap();
    let step = g.voxel_size / 50.0;
    for _ in 0..10 {
        let u = r.gen_range(0..16) * VISIBILITY_STRIDE + VISIBILITY_STRIDE / 2;
        let v = r.gen_range(0..16) * VISIBILITY_STRIDE + VISIBILITY_STRIDE / 2;
        let (o, d) = (cam.center(), cam.pixel_ray(u as f64, v as f64));
        let Some((t0, t1)) = clip_to_grid(&o, &d, &g) else { continue };
        let mut t = t0 + step * 0.5;
        while t < t1 {
            if let Some(idx) = g.world_to_grid(&(o + d * t)) {
                assert!(mask[g.linear(idx)], "pixel ({u},{v}) voxel {idx:?}");
                if g.is_occupied(idx) {
                    break;
                }
            }
            t += step;
        }
    }
}
