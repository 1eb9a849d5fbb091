//! Workloads and a warm-up timer shared by the criterion benches and the
//! acceptance suite.

use std::time::{Duration, Instant};

use odg_core::scene::{CameraModel, Gaussian3D, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RENDER_GAUSSIANS: usize = 10_000;
pub const RENDER_SIZE: usize = 256;
pub const CHAMFER_POINTS: usize = 20_000;
pub const RENDER_CLASSES: usize = 8;

/// Forward-looking camera at the origin with a 90 degree field of view.
pub fn bench_camera(size: usize) -> CameraModel {
    CameraModel::looking(Vec3::zeros(), 0.0, 0.0, std::f64::consts::FRAC_PI_2, size, size)
}

/// `n` random Gaussians inside the frustum of [`bench_camera`], 2 to 30 m out,
/// with 5 to 40 cm extents.
pub fn random_scene(n: usize, classes: usize, seed: u64) -> Vec<Gaussian3D> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = r.gen_range(2.0..30.0);
            let mean = Vec3::new(x, r.gen_range(-0.9..0.9) * x, r.gen_range(-0.9..0.9) * x);
            let scale = Vec3::new(r.gen_range(0.05..0.4), r.gen_range(0.05..0.4), r.gen_range(0.05..0.4));
            let mut q = [r.gen_range(0.5..1.0), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5)];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= norm);
            let sem = (0..classes).map(|_| r.gen_range(-2.0..2.0)).collect();
            Gaussian3D::new(mean, scale, q, r.gen_range(0.1..0.9), sem)
        })
        .collect()
}

/// Two independent uniform clouds in a 40 x 40 x 4 m street-sized volume.
pub fn random_clouds(n: usize, m: usize, seed: u64) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = |k: usize| -> Vec<Vec3> {
        (0..k)
            .map(|_| Vec3::new(r.gen_range(-20.0..20.0), r.gen_range(-20.0..20.0), r.gen_range(0.0..4.0)))
            .collect()
    };
    let a = cloud(n);
    let b = cloud(m);
    (a, b)
}

/// Runs `f` `warmup` times untimed, then returns the fastest of `reps` timed runs.
pub fn time_best<T, F: FnMut() -> T>(warmup: usize, reps: usize, mut f: F) -> Duration {
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed()
        })
        .min()
        .unwrap_or_default()
}
