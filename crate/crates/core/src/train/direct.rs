//! Per-scene fitting of raw Gaussian parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{cosine_lr, AdamW};
use super::state::{FittedState, StageState};
use super::{check_finite, render_term, FitOutput, RunConfig, StepRecord};
use crate::error::{OdgError, Result};
use crate::losses::{chamfer_with_hash, focal_loss, total_loss, FocalParams, LossReport, SpatialHash, StageLossReport};
use crate::network::sigmoid;
use crate::render::{GaussianGrad, RenderOptions};
use crate::scene::{normalize_quat, Gaussian3D, Vec3};
use crate::synthgen::FramePacket;

/// Raw parameters of `n` Gaussians in one flat vector, grouped by kind: means,
/// log-scales, raw quaternions, opacity logits, class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectModel {
    pub n: usize,
    pub num_classes: usize,
    pub theta: Vec<f64>,
}

impl DirectModel {
    /// Means uniform over the grid volume, isotropic `init_scale`, identity
    /// rotation, opacity 0.5 and uniform class logits.
    pub fn init(packet: &FramePacket, n: usize, init_scale: f64, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(OdgError::config("model", "direct fitting needs at least one Gaussian"));
        }
        let c = packet.num_classes();
        let mut m = Self {
            n,
            num_classes: c,
            theta: vec![0.0; n * (11 + c)],
        };
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xd1_7ec7);
        let (lo, ext) = (packet.grid.origin, packet.grid.extent());
        for i in 0..n {
            for a in 0..3 {
                m.theta[3 * i + a] = lo[a] + r.gen::<f64>() * ext[a];
            }
        }
        let ls = init_scale.ln();
        m.theta[3 * n..6 * n].fill(ls);
        for i in 0..n {
            m.theta[6 * n + 4 * i] = 1.0;
        }
        Ok(m)
    }

    fn rot_off(&self) -> usize {
        6 * self.n
    }

    fn opacity_off(&self) -> usize {
        10 * self.n
    }

    fn sem_off(&self) -> usize {
        11 * self.n
    }

    pub fn means(&self) -> Vec<Vec3> {
        (0..self.n).map(|i| Vec3::from_column_slice(&self.theta[3 * i..3 * i + 3])).collect()
    }

    pub fn logits(&self) -> &[f64] {
        &self.theta[self.sem_off()..]
    }

    /// Gaussians with raw (unnormalized) quaternions, as the renderer accepts.
    pub fn gaussians(&self) -> Vec<Gaussian3D> {
        let (n, c) = (self.n, self.num_classes);
        (0..n)
            .map(|i| {
                let t = &self.theta;
                let s = 3 * n + 3 * i;
                let q = self.rot_off() + 4 * i;
                Gaussian3D::new(
                    Vec3::from_column_slice(&t[3 * i..3 * i + 3]),
                    Vec3::new(t[s].exp(), t[s + 1].exp(), t[s + 2].exp()),
                    [t[q], t[q + 1], t[q + 2], t[q + 3]],
                    sigmoid(t[self.opacity_off() + i]),
                    t[self.sem_off() + c * i..self.sem_off() + c * (i + 1)].to_vec(),
                )
            })
            .collect()
    }

    /// Gaussians with unit quaternions.
    pub fn normalized_gaussians(&self) -> Result<Vec<Gaussian3D>> {
        self.gaussians()
            .into_iter()
            .map(|mut g| {
                g.rot = normalize_quat(&g.rot)?;
                Ok(g)
            })
            .collect()
    }

    /// Chains per-Gaussian gradients through the parameterization into `out`.
    fn accumulate(&self, gauss: &[Gaussian3D], grads: &[GaussianGrad], out: &mut [f64]) {
        let (n, c) = (self.n, self.num_classes);
        for (i, (g, d)) in gauss.iter().zip(grads).enumerate() {
            for a in 0..3 {
                out[3 * i + a] += d.mean[a];
                out[3 * n + 3 * i + a] += d.scale[a] * g.scale[a];
            }
            for a in 0..4 {
                out[self.rot_off() + 4 * i + a] += d.rot[a];
            }
            out[self.opacity_off() + i] += d.opacity * g.opacity * (1.0 - g.opacity);
            for k in 0..c {
                out[self.sem_off() + c * i + k] += d.sem[k];
            }
        }
    }

    fn group_ranges(&self, cfg: &RunConfig) -> [(std::ops::Range<usize>, f64); 5] {
        let (n, d) = (self.n, &cfg.direct);
        [
            (0..3 * n, d.lr_means),
            (3 * n..6 * n, d.lr_log_scale),
            (6 * n..10 * n, d.lr_rotation),
            (10 * n..11 * n, d.lr_opacity),
            (11 * n..self.theta.len(), d.lr_semantics),
        ]
    }
}

/// Loss of the keyframe scene and its gradient with respect to `model.theta`.
fn loss_and_grad(
    model: &DirectModel,
    packet: &FramePacket,
    hash: &SpatialHash,
    cfg: &RunConfig,
    render: Option<(&[crate::scene::CameraModel], &[crate::losses::ViewTarget])>,
) -> Result<(LossReport, Vec<f64>)> {
    let c = model.num_classes;
    let gauss = model.gaussians();
    let means = model.means();
    let cd = chamfer_with_hash(&means, hash)?;
    let targets: Vec<usize> = cd.nn_ab.iter().map(|&j| packet.gt.classes[j] as usize).collect();
    let (focal, grad_logits) = focal_loss(model.logits(), c, &targets, FocalParams::default())?;
    let lambdas = cfg.lambdas();
    let mut ggrads = vec![GaussianGrad::zeros(c); model.n];
    let (mut rval, mut rdepth, mut rsem) = (0.0, 0.0, 0.0);
    if let Some((cams, views)) = render {
        (rval, rdepth, rsem) = render_term(&gauss, cams, views, &RenderOptions::default(), lambdas[0], &mut ggrads)?;
    }
    let mut report = total_loss(cd.value + focal, 0.0, &[rval], cfg.lambda_3d, &lambdas)?;
    report.per_stage.push(StageLossReport {
        chamfer: cd.value,
        focal,
        render_depth: rdepth,
        render_sem: rsem,
        lambda: lambdas[0],
        ..Default::default()
    });
    let mut grad = vec![0.0; model.theta.len()];
    for (i, g) in cd.grad.iter().enumerate() {
        for a in 0..3 {
            grad[3 * i + a] += g[a];
        }
    }
    let so = model.sem_off();
    for (o, g) in grad[so..].iter_mut().zip(&grad_logits) {
        *o += g;
    }
    model.accumulate(&gauss, &ggrads, &mut grad);
    Ok((report, grad))
}

/// Optimizes `(S + D) · K_L` free Gaussians against occupancy and rendering
/// supervision of the keyframe.
pub fn fit_direct(
    packet: &FramePacket,
    cfg: &RunConfig,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<FitOutput> {
    if packet.gt.is_empty() {
        return Err(OdgError::data("grid", "direct fitting needs a non-empty ground truth"));
    }
    let mut model = DirectModel::init(packet, cfg.model.final_gaussians(), cfg.direct.init_scale, cfg.seed)?;
    let hash = SpatialHash::build(&packet.gt.points)?;
    let cams = packet.key_cameras(cfg.render_stride);
    let views = packet.key_targets(cfg.render_stride);
    let render = cfg
        .ablation
        .rendering_supervision
        .is_on()
        .then_some((cams.as_slice(), views.as_slice()));
    let mut opt = AdamW::new(model.theta.len(), cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (report, grad) = loss_and_grad(&model, packet, &hash, cfg, render)?;
        let factor = cosine_lr(1.0, step, cfg.steps);
        let rec = StepRecord {
            step,
            lr: factor * cfg.direct.lr_means,
            loss: report,
        };
        on_step(&rec)?;
        let total = rec.loss.total;
        log.push(rec);
        check_finite(step, total)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(OdgError::Divergence { step, value: f64::NAN });
        }
        if step == cfg.steps {
            break;
        }
        opt.begin_step();
        for (range, lr) in model.group_ranges(cfg) {
            opt.update(&mut model.theta, &grad, range, factor * lr, 0.0);
        }
    }
    let state = FittedState::new(
        cfg.mode,
        model.num_classes,
        vec![StageState {
            stage: 0,
            k: cfg.model.k_schedule.last().copied().unwrap_or(1),
            gaussians: model.normalized_gaussians()?,
            box_pred: Vec::new(),
            box_class: Vec::new(),
        }],
    );
    Ok(FitOutput {
        state,
        log,
        weights: None,
    })
}
