use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::project::{project_parts, ProjectionParts, ViewTransform};
use super::{kernel, kernel_grad, RenderGrad, RenderOptions, RenderOutput, Splat2D, KERNEL_CUTOFF};
use crate::error::{OdgError, Result};
use crate::scene::{normalize_quat_backward, rotation_grad_to_quat, CameraModel, Gaussian3D, Quat, Vec3};

/// Visible splats sorted front to back.
struct Prepared {
    splats: Vec<Splat2D>,
    parts: Vec<ProjectionParts>,
    src: Vec<usize>,
    num_classes: usize,
}

fn num_classes_of(gaussians: &[Gaussian3D]) -> Result<usize> {
    let c = gaussians.first().map_or(0, |g| g.sem.len());
    if gaussians.iter().any(|g| g.sem.len() != c) {
        return Err(OdgError::InvalidArgument(
            "all Gaussians must carry the same number of class logits".into(),
        ));
    }
    Ok(c)
}

fn prepare(gaussians: &[Gaussian3D], view: &ViewTransform, opts: &RenderOptions) -> Result<Prepared> {
    let num_classes = num_classes_of(gaussians)?;
    let mut items = Vec::new();
    for (i, g) in gaussians.iter().enumerate() {
        if let Some((s, p)) = project_parts(g, view, opts)? {
            items.push((i, s, p));
        }
    }
    items.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));
    let mut prep = Prepared {
        splats: Vec::with_capacity(items.len()),
        parts: Vec::with_capacity(items.len()),
        src: Vec::with_capacity(items.len()),
        num_classes,
    };
    for (i, s, p) in items {
        prep.src.push(i);
        prep.splats.push(s);
        prep.parts.push(p);
    }
    Ok(prep)
}

/// Walks the splats at `(px, py)` front to back and reports each contribution
/// as `(list position, alpha, transmittance before, power, unclamped alpha)`.
#[inline]
fn walk_pixel<F>(splats: &[Splat2D], list: &[u32], px: f64, py: f64, opts: &RenderOptions, t_min: f64, mut f: F)
where
    F: FnMut(usize, f64, f64, f64, f64),
{
    let mut t = 1.0;
    for (local, &pos) in list.iter().enumerate() {
        let s = &splats[pos as usize];
        let power = s.power(px, py);
        if !(power < KERNEL_CUTOFF) {
            continue;
        }
        let raw = s.opacity * kernel(power);
        let alpha = raw.min(opts.alpha_max);
        f(local, alpha, t, power, raw);
        t *= 1.0 - alpha;
        if t < t_min {
            break;
        }
    }
}

struct PixelValue {
    depth: f64,
    alpha: f64,
}

#[inline]
fn shade(prep: &Prepared, list: &[u32], px: f64, py: f64, opts: &RenderOptions, t_min: f64, sem: &mut [f64]) -> PixelValue {
    let mut depth = 0.0;
    let mut alpha_acc = 0.0;
    let c = prep.num_classes;
    walk_pixel(&prep.splats, list, px, py, opts, t_min, |local, alpha, t, _, _| {
        let s = &prep.splats[list[local] as usize];
        let w = t * alpha;
        depth += w * s.depth;
        alpha_acc += w;
        for k in 0..c {
            sem[k] += w * s.sem_prob[k];
        }
    });
    PixelValue {
        depth,
        alpha: alpha_acc,
    }
}

fn finish(out: &mut RenderOutput, pix: usize, v: PixelValue, opts: &RenderOptions) {
    out.depth[pix] = v.depth;
    out.alpha[pix] = v.alpha;
    out.depth_norm[pix] = if v.alpha > opts.alpha_min_norm {
        v.depth / v.alpha
    } else {
        super::DEPTH_BACKGROUND
    };
}

struct Tiling {
    tile: usize,
    tiles_x: usize,
    tiles_y: usize,
    lists: Vec<Vec<u32>>,
}

impl Tiling {
    fn pixels(&self, t: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let (u0, v0) = (tx * self.tile, ty * self.tile);
        let (u1, v1) = ((u0 + self.tile).min(width), (v0 + self.tile).min(height));
        (v0..v1).flat_map(move |v| (u0..u1).map(move |u| (u, v)))
    }
}

fn bin(prep: &Prepared, width: usize, height: usize, tile: usize) -> Tiling {
    let tile = tile.max(1);
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (pos, s) in prep.splats.iter().enumerate() {
        let u0 = (s.mean2d[0] - s.radius[0]).ceil().max(0.0);
        let u1 = (s.mean2d[0] + s.radius[0]).floor().min(width as f64 - 1.0);
        let v0 = (s.mean2d[1] - s.radius[1]).ceil().max(0.0);
        let v1 = (s.mean2d[1] + s.radius[1]).floor().min(height as f64 - 1.0);
        if u0 > u1 || v0 > v1 {
            continue;
        }
        let (tx0, tx1) = (u0 as usize / tile, u1 as usize / tile);
        let (ty0, ty1) = (v0 as usize / tile, v1 as usize / tile);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(pos as u32);
            }
        }
    }
    Tiling {
        tile,
        tiles_x,
        tiles_y,
        lists,
    }
}

/// Tiled forward pass with default options apart from the tile size.
pub fn render_view(gaussians: &[Gaussian3D], cam: &CameraModel, tile_size: usize) -> Result<RenderOutput> {
    render_view_with(
        gaussians,
        cam,
        &RenderOptions {
            tile_size,
            ..RenderOptions::default()
        },
    )
}

pub fn render_view_with(gaussians: &[Gaussian3D], cam: &CameraModel, opts: &RenderOptions) -> Result<RenderOutput> {
    let view = ViewTransform::new(cam);
    let prep = prepare(gaussians, &view, opts)?;
    let (w, h, c) = (cam.width, cam.height, prep.num_classes);
    let tiling = bin(&prep, w, h, opts.tile_size);
    let tiles: Vec<Vec<(usize, PixelValue, Vec<f64>)>> = (0..tiling.tiles_x * tiling.tiles_y)
        .into_par_iter()
        .map(|t| {
            let list = &tiling.lists[t];
            tiling
                .pixels(t, w, h)
                .map(|(u, v)| {
                    let mut sem = vec![0.0; c];
                    let val = shade(&prep, list, u as f64, v as f64, opts, opts.t_min, &mut sem);
                    (v * w + u, val, sem)
                })
                .collect()
        })
        .collect();
    let mut out = RenderOutput::zeros(w, h, c);
    for tile in tiles {
        for (pix, val, sem) in tile {
            out.sem[pix * c..(pix + 1) * c].copy_from_slice(&sem);
            finish(&mut out, pix, val, opts);
        }
    }
    Ok(out)
}

/// Per-pixel reference: every visible splat is tested at every pixel and
/// compositing never terminates early.
pub fn render_view_naive(gaussians: &[Gaussian3D], cam: &CameraModel) -> Result<RenderOutput> {
    let opts = RenderOptions::default();
    let view = ViewTransform::new(cam);
    let prep = prepare(gaussians, &view, &opts)?;
    let (w, h, c) = (cam.width, cam.height, prep.num_classes);
    let all: Vec<u32> = (0..prep.splats.len() as u32).collect();
    let mut out = RenderOutput::zeros(w, h, c);
    for v in 0..h {
        for u in 0..w {
            let pix = v * w + u;
            let val = shade(&prep, &all, u as f64, v as f64, &opts, 0.0, &mut out.sem[pix * c..(pix + 1) * c]);
            finish(&mut out, pix, val, &opts);
        }
    }
    Ok(out)
}

/// Gradients of a scalar objective with respect to one Gaussian's parameters.
/// `rot` is with respect to the stored (raw) quaternion, `sem` with respect to
/// the class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec3,
    pub scale: Vec3,
    pub rot: Quat,
    pub opacity: f64,
    pub sem: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            mean: Vec3::zeros(),
            scale: Vec3::zeros(),
            rot: [0.0; 4],
            opacity: 0.0,
            sem: vec![0.0; num_classes],
        }
    }

    pub fn add_assign(&mut self, o: &GaussianGrad) {
        self.mean += o.mean;
        self.scale += o.scale;
        for i in 0..4 {
            self.rot[i] += o.rot[i];
        }
        self.opacity += o.opacity;
        for (a, b) in self.sem.iter_mut().zip(&o.sem) {
            *a += b;
        }
    }
}

/// Image-space gradient accumulators for one splat.
#[derive(Clone)]
struct SplatGrad {
    mean2d: [f64; 2],
    /// Full-matrix gradient of the conic: (G00, G01 = G10, G11).
    conic: [f64; 3],
    opacity: f64,
    depth: f64,
}

const ZERO_SPLAT_GRAD: SplatGrad = SplatGrad {
    mean2d: [0.0; 2],
    conic: [0.0; 3],
    opacity: 0.0,
    depth: 0.0,
};

struct Contribution {
    local: usize,
    alpha: f64,
    t: f64,
    power: f64,
    raw: f64,
}

/// Reverse-mode gradients of the tiled forward pass (same options) given
/// upstream gradients on every output map. Culled Gaussians get zero gradient.
pub fn render_backward(
    gaussians: &[Gaussian3D],
    cam: &CameraModel,
    opts: &RenderOptions,
    grad: &RenderGrad,
) -> Result<Vec<GaussianGrad>> {
    if !grad.all_finite() {
        return Err(OdgError::NonFinite("upstream render gradient".into()));
    }
    let view = ViewTransform::new(cam);
    let prep = prepare(gaussians, &view, opts)?;
    let (w, h, c) = (cam.width, cam.height, prep.num_classes);
    let n_pix = w * h;
    if grad.depth.len() != n_pix || grad.alpha.len() != n_pix || grad.depth_norm.len() != n_pix || grad.sem.len() != n_pix * c {
        return Err(OdgError::InvalidArgument("render gradient shape mismatch".into()));
    }
    let tiling = bin(&prep, w, h, opts.tile_size);

    let tile_grads: Vec<(Vec<SplatGrad>, Vec<f64>)> = (0..tiling.tiles_x * tiling.tiles_y)
        .into_par_iter()
        .map(|t| {
            let list = &tiling.lists[t];
            let mut acc = vec![ZERO_SPLAT_GRAD; list.len()];
            let mut acc_sem = vec![0.0; list.len() * c];
            let mut contribs: Vec<Contribution> = Vec::new();
            for (u, v) in tiling.pixels(t, w, h) {
                let pix = v * w + u;
                let (px, py) = (u as f64, v as f64);
                contribs.clear();
                walk_pixel(&prep.splats, list, px, py, opts, opts.t_min, |local, alpha, t, power, raw| {
                    contribs.push(Contribution {
                        local,
                        alpha,
                        t,
                        power,
                        raw,
                    })
                });
                if contribs.is_empty() {
                    continue;
                }
                let mut depth = 0.0;
                let mut alpha_acc = 0.0;
                for k in &contribs {
                    let s = &prep.splats[list[k.local] as usize];
                    depth += k.t * k.alpha * s.depth;
                    alpha_acc += k.t * k.alpha;
                }
                let mut g_depth = grad.depth[pix];
                let mut g_alpha = grad.alpha[pix];
                if alpha_acc > opts.alpha_min_norm {
                    let gn = grad.depth_norm[pix];
                    g_depth += gn / alpha_acc;
                    g_alpha -= gn * depth / (alpha_acc * alpha_acc);
                }
                let g_sem = &grad.sem[pix * c..(pix + 1) * c];

                let mut suffix = 0.0;
                for k in contribs.iter().rev() {
                    let s = &prep.splats[list[k.local] as usize];
                    let mut value = g_depth * s.depth + g_alpha;
                    for j in 0..c {
                        value += g_sem[j] * s.sem_prob[j];
                    }
                    let weight = k.t * k.alpha;
                    let d_alpha = k.t * value - suffix / (1.0 - k.alpha);
                    suffix += weight * value;

                    let a = &mut acc[k.local];
                    a.depth += g_depth * weight;
                    let sem_acc = &mut acc_sem[k.local * c..(k.local + 1) * c];
                    for j in 0..c {
                        sem_acc[j] += g_sem[j] * weight;
                    }
                    if k.raw > opts.alpha_max {
                        continue;
                    }
                    let kv = kernel(k.power);
                    a.opacity += d_alpha * kv;
                    let d_power = d_alpha * s.opacity * kernel_grad(k.power);
                    let dx = px - s.mean2d[0];
                    let dy = py - s.mean2d[1];
                    let [ca, cb, cc] = s.conic;
                    a.mean2d[0] -= d_power * (ca * dx + cb * dy);
                    a.mean2d[1] -= d_power * (cb * dx + cc * dy);
                    a.conic[0] += d_power * 0.5 * dx * dx;
                    a.conic[1] += d_power * 0.5 * dx * dy;
                    a.conic[2] += d_power * 0.5 * dy * dy;
                }
            }
            (acc, acc_sem)
        })
        .collect();

    // merge in fixed tile order
    let n = prep.splats.len();
    let mut total = vec![ZERO_SPLAT_GRAD; n];
    let mut total_sem = vec![0.0; n * c];
    for (t, (acc, acc_sem)) in tile_grads.into_iter().enumerate() {
        for (local, &pos) in tiling.lists[t].iter().enumerate() {
            let pos = pos as usize;
            let (dst, src) = (&mut total[pos], &acc[local]);
            dst.mean2d[0] += src.mean2d[0];
            dst.mean2d[1] += src.mean2d[1];
            for i in 0..3 {
                dst.conic[i] += src.conic[i];
            }
            dst.opacity += src.opacity;
            dst.depth += src.depth;
            for j in 0..c {
                total_sem[pos * c + j] += acc_sem[local * c + j];
            }
        }
    }

    let mut out = vec![GaussianGrad::zeros(c); gaussians.len()];
    let chained: Vec<GaussianGrad> = (0..n)
        .into_par_iter()
        .map(|pos| {
            chain_to_gaussian(
                &gaussians[prep.src[pos]],
                &prep.splats[pos],
                &prep.parts[pos],
                &view,
                &total[pos],
                &total_sem[pos * c..(pos + 1) * c],
            )
        })
        .collect();
    for (pos, g) in chained.into_iter().enumerate() {
        out[prep.src[pos]] = g;
    }
    Ok(out)
}

fn chain_to_gaussian(
    g: &Gaussian3D,
    splat: &Splat2D,
    parts: &ProjectionParts,
    view: &ViewTransform,
    sg: &SplatGrad,
    g_prob: &[f64],
) -> GaussianGrad {
    let q = Matrix2::new(splat.conic[0], splat.conic[1], splat.conic[1], splat.conic[2]);
    let g_q = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let g_cov2 = -(q * g_q * q);

    let jac = &parts.jac;
    let m = &parts.cov_cam;
    let g_m: Matrix3<f64> = jac.transpose() * g_cov2 * jac;
    let g_j = 2.0 * g_cov2 * jac * m;

    let (x, y, z) = (parts.p_cam.x, parts.p_cam.y, parts.p_cam.z);
    let (fx, fy) = (view.fx, view.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut gp = Vector3::new(
        sg.mean2d[0] * fx / z,
        sg.mean2d[1] * fy / z,
        -sg.mean2d[0] * fx * x / z2 - sg.mean2d[1] * fy * y / z2 + sg.depth,
    );
    gp.z += g_j[(0, 0)] * (-fx / z2) + g_j[(0, 2)] * (2.0 * fx * x / z3) + g_j[(1, 1)] * (-fy / z2) + g_j[(1, 2)] * (2.0 * fy * y / z3);
    gp.x += g_j[(0, 2)] * (-fx / z2);
    gp.y += g_j[(1, 2)] * (-fy / z2);
    let mean = view.rot.transpose() * gp;

    let g_cov_world = view.rot.transpose() * g_m * view.rot;
    let r = &parts.rot;
    let s2 = g.scale.component_mul(&g.scale);
    let mut g_r = 2.0 * g_cov_world * r;
    for k in 0..3 {
        for i in 0..3 {
            g_r[(i, k)] *= s2[k];
        }
    }
    let mut scale = Vec3::zeros();
    for k in 0..3 {
        let col = r.column(k);
        scale[k] = 2.0 * g.scale[k] * (col.transpose() * g_cov_world * col)[(0, 0)];
    }
    let g_unit = rotation_grad_to_quat(&parts.unit_quat, &g_r);
    let rot = normalize_quat_backward(&g.rot, &g_unit);

    let p = &splat.sem_prob;
    let dot: f64 = p.iter().zip(g_prob).map(|(a, b)| a * b).sum();
    let sem = p.iter().zip(g_prob).map(|(pk, gk)| pk * (gk - dot)).collect();

    GaussianGrad {
        mean,
        scale,
        rot,
        opacity: sg.opacity,
        sem,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::IDENTITY_QUAT;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn cam(w: usize) -> CameraModel {
        CameraModel {
            fx: 100.0,
            fy: 100.0,
            cx: (w / 2) as f64,
            cy: (w / 2) as f64,
            width: w,
            height: w,
            cam_to_world: Matrix4::identity(),
        }
    }

    fn one_hot(c: usize, k: usize) -> Vec<f64> {
        (0..c).map(|i| if i == k { 30.0 } else { -30.0 }).collect()
    }

    #[test]
    fn empty_scene_is_zero() {
        let out = render_view(&[], &cam(16), 8).unwrap();
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        assert!(out.depth.iter().all(|&a| a == 0.0));
        assert!(out.sem.is_empty());
        let naive = render_view_naive(&[], &cam(16)).unwrap();
        assert_eq!(out, naive);
    }

    #[test]
    fn single_splat_center_pixel() {
        let g = Gaussian3D::new(Vec3::new(0.0, 0.0, 5.0), Vec3::repeat(0.2), IDENTITY_QUAT, 0.8, one_hot(4, 2));
        let c = cam(64);
        for out in [render_view(std::slice::from_ref(&g), &c, 16).unwrap(), render_view_naive(&[g], &c).unwrap()] {
            let pix = 32 * 64 + 32;
            assert_relative_eq!(out.alpha[pix], 0.8, epsilon = 1e-12);
            assert_relative_eq!(out.depth_norm[pix], 5.0, epsilon = 1e-12);
            assert_eq!(out.argmax_sem(pix), 2);
        }
    }

    #[test]
    fn two_splat_compositing() {
        let gs = vec![
            Gaussian3D::new(Vec3::new(0.0, 0.0, 6.0), Vec3::repeat(0.3), IDENTITY_QUAT, 0.5, one_hot(2, 1)),
            Gaussian3D::new(Vec3::new(0.0, 0.0, 4.0), Vec3::repeat(0.3), IDENTITY_QUAT, 0.5, one_hot(2, 0)),
        ];
        let out = render_view(&gs, &cam(64), 16).unwrap();
        let pix = 32 * 64 + 32;
        // 0.5·4 + (1 − 0.5)·0.5·6
        assert_relative_eq!(out.depth[pix], 3.5, epsilon = 1e-12);
        assert_relative_eq!(out.alpha[pix], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let g = Gaussian3D::new(Vec3::new(0.1, -0.2, 5.0), Vec3::new(0.2, 0.3, 0.1), [0.9, 0.1, 0.2, 0.1], 0.6, vec![0.3, -0.2]);
        let c = cam(32);
        let grads = render_backward(&[g], &c, &RenderOptions::default(), &RenderGrad::zeros(32, 32, 2)).unwrap();
        assert_eq!(grads[0], GaussianGrad::zeros(2));
    }

    #[test]
    fn opacity_gradient_at_peak_is_one() {
        let g = Gaussian3D::new(Vec3::new(0.0, 0.0, 5.0), Vec3::repeat(0.2), IDENTITY_QUAT, 0.8, vec![0.0]);
        let c = cam(64);
        let mut up = RenderGrad::zeros(64, 64, 1);
        up.alpha[32 * 64 + 32] = 1.0;
        let grads = render_backward(&[g], &c, &RenderOptions::default(), &up).unwrap();
        assert_relative_eq!(grads[0].opacity, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_upstream_rejected() {
        let mut up = RenderGrad::zeros(8, 8, 1);
        up.depth[3] = f64::NAN;
        assert!(render_backward(&[], &cam(8), &RenderOptions::default(), &up).is_err());
    }

    #[test]
    fn culled_gaussian_has_zero_gradient() {
        let gs = vec![
            Gaussian3D::new(Vec3::new(0.0, 0.0, -3.0), Vec3::repeat(0.2), IDENTITY_QUAT, 0.8, vec![0.0]),
            Gaussian3D::new(Vec3::new(0.0, 0.0, 5.0), Vec3::repeat(0.2), IDENTITY_QUAT, 0.8, vec![0.0]),
        ];
        let mut up = RenderGrad::zeros(32, 32, 1);
        up.alpha.iter_mut().for_each(|a| *a = 1.0);
        let grads = render_backward(&gs, &cam(32), &RenderOptions::default(), &up).unwrap();
        assert_eq!(grads[0], GaussianGrad::zeros(1));
        assert!(grads[1].opacity > 0.0);
    }
}
