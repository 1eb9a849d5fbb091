//! On-disk packet layout:
//!
//! ```text
//! <dir>/manifest.json              version, scene spec, cameras, poses, boxes, file names
//! <dir>/grid.bin                   keyframe occupancy grid
//! <dir>/frames/<f>/cam<c>_depth.f32   camera-z depth per pixel, 0 on a miss
//! <dir>/frames/<f>/cam<c>_sem.f32     class id per pixel, free label on a miss
//! ```
//!
//! Blobs are row-major little-endian f32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SceneSpec;
use crate::error::{OdgError, Result};
use crate::losses::ViewTarget;
use crate::scene::{extract_ground_truth, BoxTarget, CameraModel, EgoPose, GroundTruthSet, VoxelGrid};

pub const PACKET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const GRID_FILE: &str = "grid.bin";

/// Ground-truth maps of one camera at one frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub depth: Vec<f32>,
    pub sem: Vec<u8>,
}

impl CameraView {
    pub fn valid(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| d > 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pose: EgoPose,
    pub views: Vec<CameraView>,
}

/// A generated sequence. The keyframe is the last frame; `cameras` are
/// camera-to-ego models shared by every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePacket {
    pub spec: SceneSpec,
    pub cameras: Vec<CameraModel>,
    pub frames: Vec<Frame>,
    pub grid: VoxelGrid,
    pub gt: GroundTruthSet,
    pub boxes: Vec<BoxTarget>,
}

impl FramePacket {
    pub fn keyframe(&self) -> &Frame {
        self.frames.last().expect("packets hold at least one frame")
    }

    pub fn key_index(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.grid.num_classes()
    }

    /// Camera `cam` at frame `frame`, in world (keyframe ego) coordinates.
    pub fn world_camera(&self, frame: usize, cam: usize) -> CameraModel {
        self.cameras[cam].transformed(&self.frames[frame].pose.pose)
    }

    /// Keyframe cameras at `stride`-subsampled resolution.
    pub fn key_cameras(&self, stride: usize) -> Vec<CameraModel> {
        (0..self.cameras.len())
            .map(|c| self.world_camera(self.key_index(), c).strided(stride))
            .collect()
    }

    /// Supervision at `stride`-subsampled resolution: low-res pixel `b` takes the
    /// full-res pixel `stride · b`.
    pub fn view_target(&self, frame: usize, cam: usize, stride: usize) -> ViewTarget {
        let full = &self.cameras[cam];
        let view = &self.frames[frame].views[cam];
        let low = full.strided(stride);
        let mut t = ViewTarget {
            width: low.width,
            height: low.height,
            depth: Vec::with_capacity(low.width * low.height),
            sem: Vec::with_capacity(low.width * low.height),
            valid: Vec::with_capacity(low.width * low.height),
        };
        for v in 0..low.height {
            for u in 0..low.width {
                let pix = v * stride * full.width + u * stride;
                let d = view.depth[pix];
                t.depth.push(d as f64);
                t.valid.push(d > 0.0);
                t.sem.push(if d > 0.0 { view.sem[pix] } else { 0 });
            }
        }
        t
    }

    pub fn key_targets(&self, stride: usize) -> Vec<ViewTarget> {
        (0..self.cameras.len())
            .map(|c| self.view_target(self.key_index(), c, stride))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewFiles {
    depth: String,
    sem: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameManifest {
    pose: EgoPose,
    views: Vec<ViewFiles>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec: SceneSpec,
    grid: String,
    cameras: Vec<CameraModel>,
    frames: Vec<FrameManifest>,
    boxes: Vec<BoxTarget>,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| OdgError::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| OdgError::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(OdgError::data(
            path,
            format!("expected {expected} f32 values, found {} bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn view_names(f: usize, c: usize) -> ViewFiles {
    ViewFiles {
        depth: format!("frames/{f:03}/cam{c}_depth.f32"),
        sem: format!("frames/{f:03}/cam{c}_sem.f32"),
    }
}

pub fn save_packet(packet: &FramePacket, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| OdgError::io(dir, e))?;
    let mut frames = Vec::with_capacity(packet.frames.len());
    for (f, frame) in packet.frames.iter().enumerate() {
        let fdir = dir.join(format!("frames/{f:03}"));
        fs::create_dir_all(&fdir).map_err(|e| OdgError::io(&fdir, e))?;
        let mut views = Vec::with_capacity(frame.views.len());
        for (c, v) in frame.views.iter().enumerate() {
            let names = view_names(f, c);
            write_f32(&dir.join(&names.depth), v.depth.iter().copied())?;
            write_f32(&dir.join(&names.sem), v.sem.iter().map(|&s| s as f32))?;
            views.push(names);
        }
        frames.push(FrameManifest {
            pose: frame.pose.clone(),
            views,
        });
    }
    packet.grid.save(&dir.join(GRID_FILE))?;
    let manifest = Manifest {
        version: PACKET_VERSION,
        spec: packet.spec.clone(),
        grid: GRID_FILE.into(),
        cameras: packet.cameras.clone(),
        frames,
        boxes: packet.boxes.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| OdgError::io(&path, e))
}

pub fn load_packet(dir: &Path) -> Result<FramePacket> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| OdgError::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| OdgError::data(&path, format!("invalid JSON: {e}")))?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| OdgError::data(&path, "field `version` missing or not an integer"))?;
    if version != PACKET_VERSION as u64 {
        return Err(OdgError::Version {
            path,
            found: version as u32,
            expected: PACKET_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| OdgError::data(&path, e.to_string()))?;
    let grid = VoxelGrid::load(&dir.join(&m.grid))?;
    if grid.dims != m.spec.grid.dims || grid.free_label != m.spec.grid.num_classes {
        return Err(OdgError::data(dir.join(&m.grid), "grid does not match the manifest's scene spec"));
    }
    for f in &m.frames {
        f.pose.validate().map_err(|e| OdgError::data(&path, format!("frame pose: {e}")))?;
    }
    let mut frames = Vec::with_capacity(m.frames.len());
    for (fi, fm) in m.frames.into_iter().enumerate() {
        if fm.views.len() != m.cameras.len() {
            return Err(OdgError::data(
                &path,
                format!("frame {fi} lists {} views for {} cameras", fm.views.len(), m.cameras.len()),
            ));
        }
        let mut views = Vec::with_capacity(fm.views.len());
        for (cam, files) in m.cameras.iter().zip(&fm.views) {
            let n = cam.width * cam.height;
            let depth = read_f32(&dir.join(&files.depth), n)?;
            let sem_path: PathBuf = dir.join(&files.sem);
            let sem_f = read_f32(&sem_path, n)?;
            let mut sem = Vec::with_capacity(n);
            for s in sem_f {
                if !(s >= 0.0 && s <= grid.free_label as f32 && s.fract() == 0.0) {
                    return Err(OdgError::data(&sem_path, format!("invalid class value {s}")));
                }
                sem.push(s as u8);
            }
            views.push(CameraView { depth, sem });
        }
        frames.push(Frame { pose: fm.pose, views });
    }
    if frames.is_empty() {
        return Err(OdgError::data(&path, "packet has no frames"));
    }
    Ok(FramePacket {
        spec: m.spec,
        gt: extract_ground_truth(&grid),
        grid,
        cameras: m.cameras,
        frames,
        boxes: m.boxes,
    })
}
