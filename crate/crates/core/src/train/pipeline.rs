//! Training the query network on jittered variants of a scene.

use std::fs;
use std::path::Path;

use super::optim::{cosine_lr, AdamW};
use super::state::{FittedState, StageState};
use super::{check_finite, render_term, FitOutput, RunConfig, StepRecord};
use crate::error::{OdgError, Result};
use crate::losses::{
    box_loss, occupancy_loss, total_loss, BoxLossParams, FocalParams, LossReport, StageLossReport, StagePoints,
};
use crate::network::{
    backward_pipeline, forward_pipeline, load_params, save_params, FeaturePlaneSet, LayerConfig, Network,
    PipelineOutput, SceneBounds, StageGrad,
};
use crate::render::RenderOptions;
use crate::scene::CameraModel;
use crate::losses::ViewTarget;
use crate::synthgen::{generate_scene, packet_feature_planes, FramePacket};

pub const NETWORK_FILE: &str = "network.json";

/// Trained network: architecture plus flat parameter vector.
#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub network: Network,
    pub params: Vec<f64>,
}

impl PipelineFit {
    /// Writes `network.json` and the weight files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| OdgError::io(dir, e))?;
        let path = dir.join(NETWORK_FILE);
        let text = serde_json::to_string_pretty(&self.network.cfg).expect("layer config serializes");
        fs::write(&path, text).map_err(|e| OdgError::io(&path, e))?;
        save_params(&self.network.layout, &self.params, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(NETWORK_FILE);
        let text = fs::read_to_string(&path).map_err(|e| OdgError::io(&path, e))?;
        let cfg: LayerConfig = serde_json::from_str(&text).map_err(|e| OdgError::data(&path, e.to_string()))?;
        let network = Network::new(cfg)?;
        let params = load_params(&network.layout, dir)?;
        Ok(Self { network, params })
    }
}

/// A scene prepared for training or evaluation.
struct Scene {
    packet: FramePacket,
    planes: FeaturePlaneSet,
    bounds: SceneBounds,
    cams: Vec<CameraModel>,
    views: Vec<ViewTarget>,
}

impl Scene {
    fn new(packet: FramePacket, stride: usize) -> Result<Self> {
        Ok(Self {
            planes: packet_feature_planes(&packet)?,
            bounds: SceneBounds::from_grid(&packet.grid),
            cams: packet.key_cameras(stride),
            views: packet.key_targets(stride),
            packet,
        })
    }
}

/// Seed of the `k`-th training variant for run seed `seed`.
fn variant_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(k as u64 + 1)
}

fn stage_loss(
    net: &Network,
    params: &[f64],
    scene: &Scene,
    cfg: &RunConfig,
) -> Result<(LossReport, Vec<StageGrad>, PipelineOutput)> {
    let c = net.cfg.num_classes;
    let out = forward_pipeline(net, params, &scene.planes, &scene.bounds, cfg.seed)?;
    let initial = out.initial_world_means(&scene.bounds);
    let world: Vec<_> = out.stages.iter().map(|s| s.world_means()).collect();
    let points: Vec<StagePoints> = out
        .stages
        .iter()
        .zip(&world)
        .map(|(s, w)| StagePoints {
            means: w,
            logits: &s.class_scores,
        })
        .collect();
    let occ = occupancy_loss(&initial, &points, &scene.packet.gt, c, FocalParams::default())?;
    let mut grads: Vec<StageGrad> = out.stages.iter().map(|s| StageGrad::zeros(s, c)).collect();
    let lambdas = cfg.lambdas();
    let box_params = BoxLossParams::default();
    let mut box_sum = 0.0;
    let mut render = vec![0.0; out.stages.len()];
    let mut per_stage = Vec::with_capacity(out.stages.len());
    for (l, (s, g)) in out.stages.iter().zip(&mut grads).enumerate() {
        let mut rep = StageLossReport {
            lambda: lambdas[l],
            ..Default::default()
        };
        if !occ.skipped {
            let so = &occ.stages[l];
            rep.chamfer = so.chamfer;
            rep.focal = so.focal;
            for (i, gg) in g.gaussians.iter_mut().enumerate() {
                gg.mean += so.grad_means[i];
                for k in 0..c {
                    gg.sem[k] += so.grad_logits[i * c + k];
                }
            }
        }
        let b = box_loss(&s.box_pred, &s.box_class, &scene.packet.boxes, c, &box_params)?;
        box_sum += b.value;
        rep.box_l1 = b.l1;
        rep.box_cls = b.cls;
        rep.matches = b.matches.clone();
        for (a, d) in g.box_pred.iter_mut().zip(&b.grad_pred) {
            *a += cfg.lambda_3d * d;
        }
        for (a, d) in g.box_class.iter_mut().zip(&b.grad_class) {
            *a += cfg.lambda_3d * d;
        }
        if cfg.ablation.rendering_supervision.is_on() {
            let (v, depth, sem) = render_term(
                &s.gaussians,
                &scene.cams,
                &scene.views,
                &RenderOptions::default(),
                lambdas[l],
                &mut g.gaussians,
            )?;
            render[l] = v;
            rep.render_depth = depth;
            rep.render_sem = sem;
        }
        per_stage.push(rep);
    }
    let mut report = total_loss(occ.value, box_sum, &render, cfg.lambda_3d, &lambdas)?;
    report.initial_chamfer = occ.initial_chamfer;
    report.per_stage = per_stage;
    if occ.skipped {
        report.warnings.push("empty ground truth, occupancy loss skipped".into());
    }
    Ok((report, grads, out))
}

fn fitted_state(cfg: &RunConfig, out: &PipelineOutput, num_classes: usize) -> FittedState {
    let stages = out
        .stages
        .iter()
        .map(|s| StageState {
            stage: s.stage,
            k: s.k,
            gaussians: s.gaussians.clone(),
            box_pred: s.box_pred.clone(),
            box_class: s.box_class.clone(),
        })
        .collect();
    FittedState::new(cfg.mode, num_classes, stages)
}

/// Trains the network with AdamW and a cosine schedule on `train_scenes`
/// jittered variants of `packet`'s scene, visited round-robin, then runs it on
/// `packet` itself.
pub fn fit_pipeline(
    packet: &FramePacket,
    cfg: &RunConfig,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<FitOutput> {
    let c = packet.num_classes();
    let network = Network::new(cfg.model.layer_config(c, c + 1, &cfg.ablation))?;
    let mut params = network.init_params(cfg.seed);
    let pool = (0..cfg.train_scenes)
        .map(|k| {
            let spec = packet.spec.jittered(variant_seed(cfg.seed, k));
            Scene::new(generate_scene(&spec)?, cfg.render_stride)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(params.len(), cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let scene = &pool[step % pool.len()];
        let (report, grads, out) = stage_loss(&network, &params, scene, cfg)?;
        let lr = cosine_lr(cfg.optimizer.lr, step, cfg.steps);
        let rec = StepRecord { step, lr, loss: report };
        on_step(&rec)?;
        let total = rec.loss.total;
        log.push(rec);
        check_finite(step, total)?;
        if step == cfg.steps {
            break;
        }
        let g = backward_pipeline(&network, &params, &scene.planes, &scene.bounds, &out, &grads)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OdgError::Divergence { step, value: f64::NAN });
        }
        opt.step(&mut params, &g, lr);
    }
    let eval = Scene::new(packet.clone(), cfg.render_stride)?;
    let out = forward_pipeline(&network, &params, &eval.planes, &eval.bounds, cfg.seed)?;
    Ok(FitOutput {
        state: fitted_state(cfg, &out, c),
        log,
        weights: Some(PipelineFit { network, params }),
    })
}
