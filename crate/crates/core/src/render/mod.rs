//! Differentiable tile-based Gaussian rasterizer for depth and semantic maps.
//!
//! Splats are composited front to back: with `αᵢ = min(σᵢ·k(δ), α_max)` and
//! `Tᵢ = Π_{j<i}(1 − αⱼ)` each pixel accumulates `Σ Tᵢαᵢdᵢ` (depth),
//! `Σ Tᵢαᵢcᵢ` (semantics) and `Σ Tᵢαᵢ` (alpha). The falloff `k` is a Gaussian
//! in the dilated 2D covariance `cov2d + low_pass·I`, smoothly tapered to zero at
//! Mahalanobis power [`KERNEL_CUTOFF`] so that the tiled path and the per-pixel
//! reference see the same support.

mod image;
mod project;
mod raster;

pub use image::{read_pgm16, read_ppm, semantic_palette, write_depth_pgm, write_semantic_ppm};
pub use project::{project_gaussian, project_gaussian_with};
pub use raster::{render_backward, render_view, render_view_naive, render_view_with, GaussianGrad};


/// Near-plane distance (meters) below which Gaussians are culled.
pub const Z_NEAR: f64 = 0.05;
/// Kernel support as the power `½ δᵀ Σ⁻¹ δ` (4σ).
pub const KERNEL_CUTOFF: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Pixel terminates once transmittance drops below this.
    pub t_min: f64,
    pub alpha_max: f64,
    /// Isotropic 2D covariance dilation in pixels².
    pub low_pass: f64,
    /// `depth_norm` is only defined where accumulated alpha exceeds this.
    pub alpha_min_norm: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: 16,
            t_min: 1e-4,
            alpha_max: 0.999,
            low_pass: 0.3,
            alpha_min_norm: 1e-3,
        }
    }
}

/// Value written to `depth_norm` where alpha is too small.
pub const DEPTH_BACKGROUND: f64 = 0.0;

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Undilated image covariance `(xx, xy, yy)` in pixels².
    pub cov2d: [f64; 3],
    /// Inverse of the dilated covariance, `(a, b, c)`.
    pub conic: [f64; 3],
    /// Half-widths of the support's bounding box.
    pub radius: [f64; 2],
    pub depth: f64,
    pub opacity: f64,
    pub sem_prob: Vec<f64>,
}

impl Splat2D {
    #[inline]
    pub fn power(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        0.5 * (self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy)
    }
}

/// Tapered Gaussian falloff `e^{-p} − e^{-P}(1 + P − p)`, rescaled to 1 at the
/// center. Value and slope both reach zero at the cutoff `P`.
#[inline]
pub fn kernel(power: f64) -> f64 {
    if power >= KERNEL_CUTOFF || power.is_nan() {
        0.0
    } else {
        let floor = (-KERNEL_CUTOFF).exp();
        ((-power).exp() - floor * (1.0 + KERNEL_CUTOFF - power)) / kernel_norm()
    }
}

#[inline]
fn kernel_norm() -> f64 {
    1.0 - (-KERNEL_CUTOFF).exp() * (1.0 + KERNEL_CUTOFF)
}

#[inline]
pub(crate) fn kernel_grad(power: f64) -> f64 {
    if power >= KERNEL_CUTOFF {
        0.0
    } else {
        (-(-power).exp() + (-KERNEL_CUTOFF).exp()) / kernel_norm()
    }
}

/// Per-view render maps. Pixel `(u, v)` lives at `v * width + u`; `sem` is
/// pixel-major with `num_classes` entries per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub depth: Vec<f64>,
    pub depth_norm: Vec<f64>,
    pub sem: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderOutput {
    pub fn zeros(width: usize, height: usize, num_classes: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            num_classes,
            depth: vec![0.0; n],
            depth_norm: vec![DEPTH_BACKGROUND; n],
            sem: vec![0.0; n * num_classes],
            alpha: vec![0.0; n],
        }
    }

    pub fn pixel_sem(&self, pix: usize) -> &[f64] {
        &self.sem[pix * self.num_classes..(pix + 1) * self.num_classes]
    }

    /// Largest absolute difference over every field.
    pub fn max_abs_diff(&self, other: &RenderOutput) -> f64 {
        let d = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max)
        };
        d(&self.depth, &other.depth)
            .max(d(&self.depth_norm, &other.depth_norm))
            .max(d(&self.sem, &other.sem))
            .max(d(&self.alpha, &other.alpha))
    }

    pub fn argmax_sem(&self, pix: usize) -> usize {
        let s = self.pixel_sem(pix);
        let mut best = 0;
        for (k, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = k;
            }
        }
        best
    }
}

/// Upstream gradients with respect to each [`RenderOutput`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad {
    pub depth: Vec<f64>,
    pub depth_norm: Vec<f64>,
    pub sem: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderGrad {
    pub fn zeros(width: usize, height: usize, num_classes: usize) -> Self {
        let n = width * height;
        Self {
            depth: vec![0.0; n],
            depth_norm: vec![0.0; n],
            sem: vec![0.0; n * num_classes],
            alpha: vec![0.0; n],
        }
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.depth
            .iter()
            .chain(&self.depth_norm)
            .chain(&self.sem)
            .chain(&self.alpha)
            .all(|v| v.is_finite())
    }
}
