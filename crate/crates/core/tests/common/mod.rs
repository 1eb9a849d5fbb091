#![allow(dead_code)]

use nalgebra::Matrix4;
use odg_core::scene::{BoxAttributes, CameraModel, Gaussian3D, Vec3};
use odg_core::synthgen::{DynamicBox, GridSpec, Primitive, RigCamera, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Five-point central difference of `f` at `x` along coordinate `i` with base
/// step `h`.
pub fn central_diff5<F: FnMut(&[f64]) -> f64>(x: &[f64], i: usize, h: f64, mut f: F) -> f64 {
    let mut at = |d: f64| {
        let mut xs = x.to_vec();
        xs[i] += d;
        f(&xs)
    };
    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], i: usize, h: f64, mut f: F) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

pub fn identity_camera(size: usize, focal: f64) -> CameraModel {
    CameraModel {
        fx: focal,
        fy: focal,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
        cam_to_world: Matrix4::identity(),
    }
}

/// Random Gaussians in front of an identity camera, roughly inside its frustum.
pub fn random_gaussians(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Gaussian3D> {
    (0..n)
        .map(|_| {
            let z = rng.gen_range(3.0..8.0);
            let mean = Vec3::new(rng.gen_range(-0.4..0.4) * z, rng.gen_range(-0.4..0.4) * z, z);
            let scale = Vec3::new(rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
            let mut q = [rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= nq);
            let sem = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Gaussian3D::new(mean, scale, q, rng.gen_range(0.1..0.8), sem)
        })
        .collect()
}

/// Two cameras, two frames, a ground slab, a wall and one moving box.
pub fn small_spec() -> SceneSpec {
    SceneSpec {
        seed: 7,
        grid: GridSpec {
            origin: Vec3::new(-4.0, -4.0, -0.5),
            voxel_size: 0.5,
            dims: [16, 16, 4],
            num_classes: 4,
        },
        statics: vec![
            Primitive {
                center: Vec3::new(0.0, 0.0, -0.25),
                size: Vec3::new(8.0, 8.0, 0.5),
                yaw: 0.0,
                class: 0,
            },
            Primitive {
                center: Vec3::new(3.25, 0.0, 0.75),
                size: Vec3::new(0.5, 8.0, 1.5),
                yaw: 0.0,
                class: 1,
            },
        ],
        dynamics: vec![DynamicBox {
            center: Vec3::new(0.5, -2.0, 0.5),
            attrs: BoxAttributes {
                l: 2.0,
                w: 1.0,
                h: 1.0,
                theta: 0.3,
                vx: 2.0,
                vy: 0.0,
            },
            class: 2,
        }],
        rig: vec![
            RigCamera {
                position: Vec3::new(0.0, 0.0, 1.0),
                yaw_deg: 0.0,
                pitch_deg: 10.0,
                hfov_deg: 90.0,
                width: 32,
                height: 24,
            },
            RigCamera {
                position: Vec3::new(0.0, 0.0, 1.0),
                yaw_deg: 180.0,
                pitch_deg: 0.0,
                hfov_deg: 80.0,
                width: 32,
                height: 24,
            },
        ],
        frames: 2,
        frame_gap: 0.5,
        ego_velocity: [1.0, 0.0],
    }
}
