use nalgebra::{Matrix2x3, Matrix3, Vector3};

use super::{RenderOptions, Splat2D, Z_NEAR};
use crate::error::Result;
use crate::scene::{normalize_quat, quat_to_rotation, CameraModel, Gaussian3D};

/// World-to-camera rotation/translation plus intrinsics, extracted once per view.
#[derive(Debug, Clone)]
pub(crate) struct ViewTransform {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl ViewTransform {
    pub fn new(cam: &CameraModel) -> Self {
        let (rot, trans) = cam.world_to_cam();
        Self {
            rot,
            trans,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
        }
    }
}

/// Intermediates of one projection that the backward pass reuses.
#[derive(Debug, Clone)]
pub(crate) struct ProjectionParts {
    pub p_cam: Vector3<f64>,
    pub jac: Matrix2x3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub rot: Matrix3<f64>,
    pub unit_quat: [f64; 4],
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn project_parts(
    g: &Gaussian3D,
    view: &ViewTransform,
    opts: &RenderOptions,
) -> Result<Option<(Splat2D, ProjectionParts)>> {
    let p_cam = view.rot * g.mean + view.trans;
    let z = p_cam.z;
    if !(z > Z_NEAR) {
        return Ok(None);
    }
    let unit_quat = normalize_quat(&g.rot)?;
    let rot = quat_to_rotation(&unit_quat);
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let cov_world = rot * s2 * rot.transpose();
    let cov_cam = view.rot * cov_world * view.rot.transpose();
    let jac = Matrix2x3::new(
        view.fx / z,
        0.0,
        -view.fx * p_cam.x / (z * z),
        0.0,
        view.fy / z,
        -view.fy * p_cam.y / (z * z),
    );
    let c2 = jac * cov_cam * jac.transpose();
    let cov2d = [c2[(0, 0)], 0.5 * (c2[(0, 1)] + c2[(1, 0)]), c2[(1, 1)]];
    let mean2d = [
        view.fx * p_cam.x / z + view.cx,
        view.fy * p_cam.y / z + view.cy,
    ];
    let a = cov2d[0] + opts.low_pass;
    let b = cov2d[1];
    let c = cov2d[2] + opts.low_pass;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return Ok(None);
    }
    let conic = [c / det, -b / det, a / det];
    let r2 = 2.0 * super::KERNEL_CUTOFF;
    let radius = [(r2 * a).sqrt(), (r2 * c).sqrt()];
    let (w, h) = (view.width as f64, view.height as f64);
    if mean2d[0] + radius[0] < 0.0
        || mean2d[0] - radius[0] > w - 1.0
        || mean2d[1] + radius[1] < 0.0
        || mean2d[1] - radius[1] > h - 1.0
    {
        return Ok(None);
    }
    let splat = Splat2D {
        mean2d,
        cov2d,
        conic,
        radius,
        depth: z,
        opacity: g.opacity,
        sem_prob: softmax(&g.sem),
    };
    Ok(Some((
        splat,
        ProjectionParts {
            p_cam,
            jac,
            cov_cam,
            rot,
            unit_quat,
        },
    )))
}

/// Projects `g` into `cam`. Returns `None` when the Gaussian is behind the near
/// plane or its 2D support misses the image.
pub fn project_gaussian(g: &Gaussian3D, cam: &CameraModel) -> Result<Option<Splat2D>> {
    project_gaussian_with(g, cam, &RenderOptions::default())
}

pub fn project_gaussian_with(
    g: &Gaussian3D,
    cam: &CameraModel,
    opts: &RenderOptions,
) -> Result<Option<Splat2D>> {
    Ok(project_parts(g, &ViewTransform::new(cam), opts)?.map(|(s, _)| s))
}
