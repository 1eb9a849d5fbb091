use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Vec3;
use crate::error::{OdgError, Result};

pub const GRID_MAGIC: &[u8; 8] = b"ODGGRID1";
const HEADER_LEN: usize = 32;

/// Dense labeled occupancy grid. Labels are stored z-fastest:
/// `labels[(i * W + j) * Z + k]` for index `(i, j, k)` along `(x, y, z)`.
/// `free_label` (= number of semantic classes) marks empty voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub free_label: u8,
    pub labels: Vec<u8>,
}

impl VoxelGrid {
    /// All-free grid.
    pub fn empty(origin: Vec3, voxel_size: f64, dims: [usize; 3], free_label: u8) -> Result<Self> {
        let g = Self {
            origin,
            voxel_size,
            dims,
            free_label,
            labels: vec![free_label; dims[0] * dims[1] * dims[2]],
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(OdgError::config("dims", "all grid dimensions must be positive"));
        }
        if !(self.voxel_size > 0.0) {
            return Err(OdgError::config("voxel_size", "must be positive"));
        }
        if self.labels.len() != self.len() {
            return Err(OdgError::config(
                "labels",
                format!("expected {} labels, found {}", self.len(), self.labels.len()),
            ));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l > self.free_label) {
            return Err(OdgError::config(
                "labels",
                format!("label {bad} exceeds free label {}", self.free_label),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.free_label as usize
    }

    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    #[inline]
    pub fn unlinear(&self, n: usize) -> [usize; 3] {
        let k = n % self.dims[2];
        let ij = n / self.dims[2];
        [ij / self.dims[1], ij % self.dims[1], k]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 3]) -> u8 {
        self.labels[self.linear(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 3], label: u8) {
        let n = self.linear(idx);
        self.labels[n] = label;
    }

    #[inline]
    pub fn is_occupied(&self, idx: [usize; 3]) -> bool {
        self.get(idx) != self.free_label
    }

    /// World-space extent `dims · voxel_size`.
    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ) * self.voxel_size
    }

    pub fn max_corner(&self) -> Vec3 {
        self.origin + self.extent()
    }

    /// Containing voxel of `p`, or `None` outside the grid.
    pub fn world_to_grid(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    /// Center of voxel `idx`.
    pub fn grid_to_world(&self, idx: [usize; 3]) -> Result<Vec3> {
        if (0..3).any(|a| idx[a] >= self.dims[a]) {
            return Err(OdgError::IndexOutOfRange {
                index: idx,
                dims: self.dims,
            });
        }
        Ok(self.center_unchecked(idx))
    }

    #[inline]
    pub(crate) fn center_unchecked(&self, idx: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin.x + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin.y + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin.z + (idx[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Normalized `[0,1]³` scene coordinates to world coordinates.
    pub fn denormalize(&self, n: &Vec3) -> Vec3 {
        self.origin + n.component_mul(&self.extent())
    }

    pub fn normalize(&self, p: &Vec3) -> Vec3 {
        (p - self.origin).component_div(&self.extent())
    }

    pub fn same_geometry(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
            && self.voxel_size == other.voxel_size
            && self.origin == other.origin
            && self.free_label == other.free_label
    }

    pub fn check_geometry(&self, other: &VoxelGrid) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(OdgError::GeometryMismatch(format!(
                "dims {:?}/{:?}, voxel size {}/{}, origin {:?}/{:?}, free label {}/{}",
                self.dims,
                other.dims,
                self.voxel_size,
                other.voxel_size,
                self.origin.as_slice(),
                other.origin.as_slice(),
                self.free_label,
                other.free_label
            )))
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != self.free_label).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.labels.len());
        out.extend_from_slice(GRID_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.extend_from_slice(&(self.free_label as u16).to_le_bytes());
        out.extend_from_slice(&(self.voxel_size as f32).to_le_bytes());
        for a in 0..3 {
            out.extend_from_slice(&(self.origin[a] as f32).to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(OdgError::data(path, "grid header truncated"));
        }
        if &bytes[..8] != GRID_MAGIC {
            return Err(OdgError::data(path, "bad grid magic"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
        let dims = [u16_at(8) as usize, u16_at(10) as usize, u16_at(12) as usize];
        let free = u16_at(14);
        if free > u8::MAX as u16 {
            return Err(OdgError::data(path, format!("free label {free} exceeds 255")));
        }
        let voxel_size = f32_at(16);
        let origin = Vec3::new(f32_at(20), f32_at(24), f32_at(28));
        let n = dims[0] * dims[1] * dims[2];
        if bytes.len() != HEADER_LEN + n {
            return Err(OdgError::data(
                path,
                format!("expected {} label bytes, found {}", n, bytes.len() - HEADER_LEN),
            ));
        }
        let grid = Self {
            origin,
            voxel_size,
            dims,
            free_label: free as u8,
            labels: bytes[HEADER_LEN..].to_vec(),
        };
        grid.validate()
            .map_err(|e| OdgError::data(path, e.to_string()))?;
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| OdgError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| OdgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| OdgError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Voxel-center coordinates and class labels of every occupied voxel, in
/// lexicographic `(i, j, k)` order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub points: Vec<Vec3>,
    pub classes: Vec<u8>,
}

impl GroundTruthSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_ground_truth(grid: &VoxelGrid) -> GroundTruthSet {
    let mut out = GroundTruthSet::default();
    for (n, &label) in grid.labels.iter().enumerate() {
        if label != grid.free_label {
            out.points.push(grid.center_unchecked(grid.unlinear(n)));
            out.classes.push(label);
        }
    }
    out
}

/// Votes each in-bounds point's class into its containing voxel. Within a voxel the
/// most confident point wins, then the lowest class id. Returns the grid and the
/// number of out-of-bounds points dropped.
pub fn points_to_grid(
    points: &[Vec3],
    classes: &[u8],
    confidences: &[f64],
    template: &VoxelGrid,
) -> Result<(VoxelGrid, usize)> {
    if points.len() != classes.len() || points.len() != confidences.len() {
        return Err(OdgError::InvalidArgument(format!(
            "points/classes/confidences lengths differ: {}/{}/{}",
            points.len(),
            classes.len(),
            confidences.len()
        )));
    }
    let mut grid = VoxelGrid {
        labels: vec![template.free_label; template.len()],
        ..template.clone()
    };
    let mut best = vec![f64::NEG_INFINITY; grid.len()];
    let mut dropped = 0;
    for ((p, &c), &conf) in points.iter().zip(classes).zip(confidences) {
        if c >= template.free_label {
            return Err(OdgError::InvalidArgument(format!(
                "class {c} is not a semantic class"
            )));
        }
        let Some(idx) = grid.world_to_grid(p) else {
            dropped += 1;
            continue;
        };
        let n = grid.linear(idx);
        let cur = grid.labels[n];
        if conf > best[n] || (conf == best[n] && c < cur) {
            best[n] = conf;
            grid.labels[n] = c;
        }
    }
    Ok((grid, dropped))
}
