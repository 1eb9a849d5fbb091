//! Fitting loops: direct optimization of raw Gaussians and training of the
//! query network, plus persistence and evaluation of fitted states.

mod config;
mod direct;
mod eval;
mod optim;
mod pipeline;
mod state;

pub use config::{Ablation, DirectConfig, FitMode, ModelConfig, RunConfig, Toggle};
pub use direct::{fit_direct, DirectModel};
pub use eval::{
    box_region_mask, depth_l1, eval_rays, evaluate_stage, keyframe_visibility, predict_grid, BOX_REGION_MARGIN,
};
pub use optim::{cosine_lr, AdamW, AdamWParams};
pub use pipeline::{fit_pipeline, PipelineFit};
pub use state::{FittedState, StageState, STATE_FILE, STATE_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{OdgError, Result};
use crate::losses::{rendering_loss, LossReport, ViewTarget};
use crate::render::{render_backward, render_view_with, GaussianGrad, RenderOptions};
use crate::scene::{CameraModel, Gaussian3D};
use crate::synthgen::FramePacket;

/// One line of the training log. Step `s` reports the loss of the parameters
/// after `s` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
}

impl StepRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("step record serializes")
    }
}

/// Result of a fitting run.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: FittedState,
    pub log: Vec<StepRecord>,
    /// Network weights (pipeline mode).
    pub weights: Option<PipelineFit>,
}

/// Runs the configured fit on `packet`, calling `on_step` after every logged
/// step. A non-finite total aborts with [`OdgError::Divergence`].
pub fn fit(
    packet: &FramePacket,
    cfg: &RunConfig,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<FitOutput> {
    cfg.validate()?;
    match cfg.mode {
        FitMode::Direct => fit_direct(packet, cfg, on_step),
        FitMode::Pipeline => fit_pipeline(packet, cfg, on_step),
    }
}

pub(crate) fn check_finite(step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(OdgError::Divergence { step, value })
    }
}

/// Rendering loss of one stage over `cams`, adding `weight` times its gradient
/// into `grads`. Returns `(value, depth, sem)`.
pub(crate) fn render_term(
    gaussians: &[Gaussian3D],
    cams: &[CameraModel],
    targets: &[ViewTarget],
    opts: &RenderOptions,
    weight: f64,
    grads: &mut [GaussianGrad],
) -> Result<(f64, f64, f64)> {
    let renders = cams
        .iter()
        .map(|c| render_view_with(gaussians, c, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = rendering_loss(&renders, targets)?;
    if weight != 0.0 && !loss.empty {
        for (cam, rg) in cams.iter().zip(&mut loss.grads) {
            for v in rg.depth_norm.iter_mut().chain(rg.sem.iter_mut()) {
                *v *= weight;
            }
            for (acc, g) in grads.iter_mut().zip(render_backward(gaussians, cam, opts, rg)?) {
                acc.add_assign(&g);
            }
        }
    }
    Ok((loss.value, loss.depth, loss.sem))
}
