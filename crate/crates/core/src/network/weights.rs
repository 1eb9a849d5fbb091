//! Parameter files: `weights.json` lists every tensor's name, shape and offset
//! (in values) into `weights.bin`, a little-endian f32 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{ParamEntry, ParamLayout};
use crate::error::{OdgError, Result};

pub const WEIGHTS_VERSION: u32 = 1;
pub const WEIGHTS_MANIFEST: &str = "weights.json";
pub const WEIGHTS_BLOB: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    version: u32,
    blob: String,
    tensors: Vec<ParamEntry>,
}

pub fn save_params(layout: &ParamLayout, params: &[f64], dir: &Path) -> Result<()> {
    if params.len() != layout.len {
        return Err(OdgError::InvalidArgument(format!(
            "layout holds {} values, got {}",
            layout.len,
            params.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| OdgError::io(dir, e))?;
    let blob = dir.join(WEIGHTS_BLOB);
    let bytes: Vec<u8> = params.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(&blob, bytes).map_err(|e| OdgError::io(&blob, e))?;
    let manifest = WeightsManifest {
        version: WEIGHTS_VERSION,
        blob: WEIGHTS_BLOB.into(),
        tensors: layout.entries.clone(),
    };
    let path = dir.join(WEIGHTS_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("weights manifest serializes");
    fs::write(&path, text).map_err(|e| OdgError::io(&path, e))
}

/// Loads parameters saved for `layout`; every tensor must match by name and shape.
pub fn load_params(layout: &ParamLayout, dir: &Path) -> Result<Vec<f64>> {
    let path = dir.join(WEIGHTS_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| OdgError::io(&path, e))?;
    let m: WeightsManifest =
        serde_json::from_str(&text).map_err(|e| OdgError::data(&path, format!("invalid weights manifest: {e}")))?;
    if m.version != WEIGHTS_VERSION {
        return Err(OdgError::Version {
            path,
            found: m.version,
            expected: WEIGHTS_VERSION,
        });
    }
    let blob = dir.join(&m.blob);
    let bytes = fs::read(&blob).map_err(|e| OdgError::io(&blob, e))?;
    if bytes.len() % 4 != 0 {
        return Err(OdgError::data(&blob, "length is not a multiple of 4"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut out = vec![0.0; layout.len];
    for e in &layout.entries {
        let Some(found) = m.tensors.iter().find(|t| t.name == e.name) else {
            return Err(OdgError::data(&path, format!("tensor `{}` missing", e.name)));
        };
        if found.shape != e.shape {
            return Err(OdgError::data(
                &path,
                format!("tensor `{}` has shape {:?}, expected {:?}", e.name, found.shape, e.shape),
            ));
        }
        let end = found.offset + found.numel();
        if end > values.len() {
            return Err(OdgError::data(&blob, format!("tensor `{}` runs past the end of the blob", e.name)));
        }
        out[e.offset..e.offset + e.numel()].copy_from_slice(&values[found.offset..end]);
    }
    Ok(out)
}
