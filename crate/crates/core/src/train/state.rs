//! Persisted result of a fit: the Gaussians of every supervised stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::FitMode;
use crate::error::{OdgError, Result};
use crate::scene::Gaussian3D;

pub const STATE_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: usize,
    /// Gaussians per query at this stage.
    pub k: usize,
    pub gaussians: Vec<Gaussian3D>,
    /// `D × 10` box vectors (empty for direct fits).
    pub box_pred: Vec<f64>,
    /// `D × (C + 1)` box class logits.
    pub box_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedState {
    pub version: u32,
    pub mode: FitMode,
    pub num_classes: usize,
    pub stages: Vec<StageState>,
}

impl FittedState {
    pub fn new(mode: FitMode, num_classes: usize, stages: Vec<StageState>) -> Self {
        Self {
            version: STATE_VERSION,
            mode,
            num_classes,
            stages,
        }
    }

    pub fn final_stage(&self) -> Result<&StageState> {
        self.stages
            .last()
            .ok_or_else(|| OdgError::InvalidArgument("fitted state has no stages".into()))
    }

    /// Writes `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| OdgError::io(dir, e))?;
        let path = dir.join(STATE_FILE);
        let text = serde_json::to_string(self).expect("state serializes");
        fs::write(&path, text).map_err(|e| OdgError::io(&path, e))
    }

    /// Reads `state.json` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| OdgError::io(&path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| OdgError::data(&path, e.to_string()))?;
        if s.version != STATE_VERSION {
            return Err(OdgError::Version {
                path,
                found: s.version,
                expected: STATE_VERSION,
            });
        }
        for st in &s.stages {
            if st.gaussians.iter().any(|g| g.sem.len() != s.num_classes) {
                return Err(OdgError::data(
                    &path,
                    format!("stage {} has logits of the wrong width", st.stage),
                ));
            }
        }
        Ok(s)
    }
}
