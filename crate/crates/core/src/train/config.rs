use serde::{Deserialize, Serialize};

use super::optim::AdamWParams;
use crate::error::{OdgError, Result};
use crate::losses::{default_lambda_schedule, DEFAULT_LAMBDA_3D};
use crate::network::{AttentionMode, LayerConfig, MotionMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Optimize raw Gaussian parameters directly.
    Direct,
    /// Train the query network.
    Pipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    #[default]
    On,
    Off,
}

impl Toggle {
    pub fn is_on(self) -> bool {
        self == Toggle::On
    }
}

/// Query network shape. Class and feature-channel counts come from the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub static_queries: usize,
    pub dynamic_queries: usize,
    pub k_schedule: Vec<usize>,
    pub feat_dim: usize,
    pub heads: usize,
    pub sample_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            static_queries: 32,
            dynamic_queries: 8,
            k_schedule: vec![1, 2, 4, 8],
            feat_dim: 64,
            heads: 4,
            sample_points: 4,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.k_schedule.len()
    }

    /// Gaussians produced by the last stage.
    pub fn final_gaussians(&self) -> usize {
        (self.static_queries + self.dynamic_queries) * self.k_schedule.last().copied().unwrap_or(0)
    }

    pub fn layer_config(&self, num_classes: usize, channels: usize, ablation: &Ablation) -> LayerConfig {
        LayerConfig {
            k_schedule: self.k_schedule.clone(),
            static_queries: self.static_queries,
            dynamic_queries: self.dynamic_queries,
            feat_dim: self.feat_dim,
            heads: self.heads,
            sample_points: self.sample_points,
            num_classes,
            channels,
            attention: ablation.attention,
            motion: ablation.motion_compensation,
        }
    }
}

/// Component switches of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub motion_compensation: MotionMode,
    pub attention: AttentionMode,
    pub rendering_supervision: Toggle,
}

/// Per-group step sizes for direct fitting (meters for means, natural units
/// otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectConfig {
    pub lr_means: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_semantics: f64,
    /// Initial Gaussian scale (meters).
    pub init_scale: f64,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            lr_means: 0.02,
            lr_log_scale: 0.01,
            lr_rotation: 0.01,
            lr_opacity: 0.05,
            lr_semantics: 0.05,
            init_scale: 0.3,
        }
    }
}

/// Everything a fitting run needs besides the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: FitMode,
    #[serde(default)]
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_lambda_3d")]
    pub lambda_3d: f64,
    /// Per-stage rendering weights; defaults by stage count.
    #[serde(default)]
    pub lambda_schedule: Option<Vec<f64>>,
    #[serde(default)]
    pub optimizer: AdamWParams,
    #[serde(default)]
    pub direct: DirectConfig,
    #[serde(default)]
    pub ablation: Ablation,
    /// Supervision maps keep every `render_stride`-th pixel per axis.
    #[serde(default = "default_render_stride")]
    pub render_stride: usize,
    /// Pipeline mode trains on this many jittered variants of the scene.
    #[serde(default = "default_train_scenes")]
    pub train_scenes: usize,
}

fn default_lambda_3d() -> f64 {
    DEFAULT_LAMBDA_3D
}

fn default_render_stride() -> usize {
    4
}

fn default_train_scenes() -> usize {
    8
}

impl RunConfig {
    pub fn new(mode: FitMode, steps: usize) -> Self {
        Self {
            mode,
            seed: 0,
            steps,
            model: ModelConfig::default(),
            lambda_3d: DEFAULT_LAMBDA_3D,
            lambda_schedule: None,
            optimizer: AdamWParams::default(),
            direct: DirectConfig::default(),
            ablation: Ablation::default(),
            render_stride: default_render_stride(),
            train_scenes: default_train_scenes(),
        }
    }

    /// Stages supervised by this run: one for direct fitting.
    pub fn stages(&self) -> usize {
        match self.mode {
            FitMode::Direct => 1,
            FitMode::Pipeline => self.model.stages(),
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.lambda_schedule
            .clone()
            .unwrap_or_else(|| default_lambda_schedule(self.stages()))
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(OdgError::config(name, format!("must be finite and non-negative, got {v}")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(OdgError::config(name, format!("must be positive, got {v}")))
            }
        };
        // Class and channel counts are placeholders; the scene supplies them.
        self.model
            .layer_config(1, 1, &self.ablation)
            .validate()
            .map_err(|e| match e {
                OdgError::Config { field, reason } => OdgError::config(format!("model.{field}"), reason),
                other => other,
            })?;
        finite_nonneg("lambda_3d", self.lambda_3d)?;
        if let Some(ls) = &self.lambda_schedule {
            if ls.len() != self.stages() {
                return Err(OdgError::config(
                    "lambda_schedule",
                    format!("has {} entries for {} stages", ls.len(), self.stages()),
                ));
            }
            for l in ls {
                finite_nonneg("lambda_schedule", *l)?;
            }
        }
        let o = &self.optimizer;
        positive("optimizer.lr", o.lr)?;
        finite_nonneg("optimizer.weight_decay", o.weight_decay)?;
        positive("optimizer.eps", o.eps)?;
        for (name, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OdgError::config(name, format!("must be in [0, 1), got {b}")));
            }
        }
        let d = &self.direct;
        for (name, v) in [
            ("direct.lr_means", d.lr_means),
            ("direct.lr_log_scale", d.lr_log_scale),
            ("direct.lr_rotation", d.lr_rotation),
            ("direct.lr_opacity", d.lr_opacity),
            ("direct.lr_semantics", d.lr_semantics),
        ] {
            finite_nonneg(name, v)?;
        }
        positive("direct.init_scale", d.init_scale)?;
        if self.render_stride == 0 {
            return Err(OdgError::config("render_stride", "must be at least 1"));
        }
        if self.train_scenes == 0 {
            return Err(OdgError::config("train_scenes", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::new(FitMode::Pipeline, 10);
        c.validate().unwrap();
        assert_eq!(c.lambdas(), vec![0.05, 0.01, 0.01, 0.05]);
        assert_eq!(c.optimizer.lr, 2e-4);
        assert_eq!(c.optimizer.weight_decay, 0.01);
        assert_eq!(c.model.final_gaussians(), 320);
        assert_eq!(RunConfig::new(FitMode::Direct, 1).lambdas(), vec![0.05]);
    }

    #[test]
    fn errors_name_fields() {
        let mut c = RunConfig::new(FitMode::Pipeline, 10);
        c.model.k_schedule = vec![4, 2];
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("model.k_schedule"), "{e}");
        let mut c = RunConfig::new(FitMode::Pipeline, 10);
        c.lambda_schedule = Some(vec![0.1]);
        assert!(c.validate().unwrap_err().to_string().contains("lambda_schedule"));
        let mut c = RunConfig::new(FitMode::Direct, 10);
        c.lambda_3d = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("lambda_3d"));
    }

    #[test]
    fn flags_parse_from_json() {
        let c: RunConfig = serde_json::from_str(
            r#"{"mode":"pipeline","steps":3,"ablation":{"motion_compensation":"ego","attention":"cross","rendering_supervision":"off"}}"#,
        )
        .unwrap();
        assert_eq!(c.ablation.motion_compensation, MotionMode::Ego);
        assert_eq!(c.ablation.attention, AttentionMode::Cross);
        assert!(!c.ablation.rendering_supervision.is_on());
        assert!(serde_json::from_str::<RunConfig>(r#"{"mode":"direct","steps":1,"bogus":1}"#).is_err());
    }
}
