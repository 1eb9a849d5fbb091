//! Two-sided Chamfer distance with exact nearest neighbors from a uniform grid hash.

use rayon::prelude::*;

use crate::error::{OdgError, Result};
use crate::scene::Vec3;

/// Target number of points per hash cell.
const POINTS_PER_CELL: f64 = 2.0;
/// Upper bound on the number of cells along one axis.
const MAX_CELLS_PER_AXIS: usize = 256;

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

/// Uniform-grid bucketing of a point set, stored compressed: points sorted by cell,
/// then by index, with per-cell start offsets.
#[derive(Debug, Clone)]
pub struct SpatialHash {
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
    points: Vec<Vec3>,
}

impl SpatialHash {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(OdgError::InvalidArgument("cannot hash an empty point set".into()));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(OdgError::NonFinite("chamfer point set".into()));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        let longest = ext.max();
        let vol: f64 = ext.iter().map(|e| e.max(longest * 1e-3).max(1e-9)).product();
        let mut cell = (vol * POINTS_PER_CELL / points.len() as f64).cbrt();
        if !(cell > 0.0) {
            cell = 1.0;
        }
        cell = cell.max(longest / MAX_CELLS_PER_AXIS as f64);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(MAX_CELLS_PER_AXIS));
        let ncell = dims[0] * dims[1] * dims[2];
        let mut hash = Self {
            lo,
            cell,
            dims,
            starts: vec![0; ncell + 1],
            order: Vec::with_capacity(points.len()),
            points: points.to_vec(),
        };
        let keys: Vec<usize> = points.iter().map(|p| hash.key(hash.cell_of(p))).collect();
        for &k in &keys {
            hash.starts[k + 1] += 1;
        }
        for c in 0..ncell {
            hash.starts[c + 1] += hash.starts[c];
        }
        let mut fill = hash.starts.clone();
        hash.order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            hash.order[fill[k]] = i;
            fill[k] += 1;
        }
        Ok(hash)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Cell containing `p`, clamped into the grid.
    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.lo[a]) / self.cell).floor();
            if c <= 0.0 {
                0
            } else {
                (c as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn key(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn scan_cell(&self, c: [usize; 3], p: &Vec3, best: &mut (usize, f64)) {
        let k = self.key(c);
        for &i in &self.order[self.starts[k]..self.starts[k + 1]] {
            let d = dist2(p, &self.points[i]);
            if d < best.1 || (d == best.1 && i < best.0) {
                *best = (i, d);
            }
        }
    }

    /// Index and squared distance of the nearest hashed point; ties go to the
    /// smallest index.
    ///
    /// Rings of cells are scanned outward from the (clamped) cell of `p`. Every
    /// point in ring `r + 1` or beyond lies at least `r · cell` away, so the
    /// search stops once the best distance is strictly below that bound.
    pub fn nearest(&self, p: &Vec3) -> (usize, f64) {
        let c = self.cell_of(p);
        let mut best = (usize::MAX, f64::INFINITY);
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..=max_r {
            self.scan_ring(c, r, p, &mut best);
            let bound = r as f64 * self.cell;
            if best.1 < bound * bound {
                break;
            }
        }
        best
    }

    fn scan_ring(&self, c: [usize; 3], r: usize, p: &Vec3, best: &mut (usize, f64)) {
        let r = r as isize;
        let range = |a: usize| {
            let lo = (c[a] as isize - r).max(0);
            let hi = (c[a] as isize + r).min(self.dims[a] as isize - 1);
            (lo, hi)
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        let on_shell = |v: isize, a: usize| (v - c[a] as isize).abs() == r;
        for x in x0..=x1 {
            let sx = on_shell(x, 0);
            for y in y0..=y1 {
                let sxy = sx || on_shell(y, 1);
                if sxy {
                    for z in z0..=z1 {
                        self.scan_cell([x as usize, y as usize, z as usize], p, best);
                    }
                } else {
                    // Only the two z faces belong to this ring.
                    for z in [c[2] as isize - r, c[2] as isize + r] {
                        if z >= z0 && z <= z1 && (r > 0 || z == c[2] as isize) {
                            self.scan_cell([x as usize, y as usize, z as usize], p, best);
                        }
                        if r == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}

/// Chamfer value, gradient with respect to the first set, and both nearest-neighbor maps.
#[derive(Debug, Clone)]
pub struct ChamferResult {
    pub value: f64,
    pub grad: Vec<Vec3>,
    /// For each point of `A`, its nearest point in `B`.
    pub nn_ab: Vec<usize>,
    /// For each point of `B`, its nearest point in `A`.
    pub nn_ba: Vec<usize>,
}

fn assemble(a: &[Vec3], b: &[Vec3], nn_ab: Vec<usize>, nn_ba: Vec<usize>) -> ChamferResult {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let mut grad = vec![Vec3::zeros(); a.len()];
    let mut s_ab = 0.0;
    for (i, &j) in nn_ab.iter().enumerate() {
        let d = a[i] - b[j];
        let len = d.norm();
        s_ab += len;
        if len > 0.0 {
            grad[i] += d / (len * n);
        }
    }
    let mut s_ba = 0.0;
    for (j, &i) in nn_ba.iter().enumerate() {
        let d = a[i] - b[j];
        let len = d.norm();
        s_ba += len;
        if len > 0.0 {
            grad[i] += d / (len * m);
        }
    }
    ChamferResult {
        value: s_ab / n + s_ba / m,
        grad,
        nn_ab,
        nn_ba,
    }
}

fn check_sets(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(OdgError::InvalidArgument(format!(
            "chamfer distance needs non-empty sets, got {} and {} points",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `(1/N) Σ_a min_b ‖a − b‖ + (1/M) Σ_b min_a ‖a − b‖`, gradient with respect to `a`.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<ChamferResult> {
    check_sets(a, b)?;
    let hb = SpatialHash::build(b)?;
    chamfer_with_hash(a, &hb)
}

/// Same as [`chamfer_distance`] with a prebuilt hash of the target set.
pub fn chamfer_with_hash(a: &[Vec3], hb: &SpatialHash) -> Result<ChamferResult> {
    check_sets(a, &hb.points)?;
    let ha = SpatialHash::build(a)?;
    let nn_ab: Vec<usize> = a.par_iter().map(|p| hb.nearest(p).0).collect();
    let nn_ba: Vec<usize> = hb.points.par_iter().map(|p| ha.nearest(p).0).collect();
    Ok(assemble(a, &hb.points, nn_ab, nn_ba))
}

fn brute_nearest(p: &Vec3, set: &[Vec3]) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, q) in set.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Quadratic-time reference with the same tie-break (smallest index).
pub fn chamfer_brute_force(a: &[Vec3], b: &[Vec3]) -> Result<ChamferResult> {
    check_sets(a, b)?;
    let nn_ab = a.iter().map(|p| brute_nearest(p, b)).collect();
    let nn_ba = b.iter().map(|p| brute_nearest(p, a)).collect();
    Ok(assemble(a, b, nn_ab, nn_ba))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_are_zero() {
        let a = vec![Vec3::new(0.0, 1.0, 2.0), Vec3::new(-1.0, 0.5, 3.0)];
        assert_eq!(chamfer_distance(&a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn unit_pair() {
        let r = chamfer_distance(&[Vec3::zeros()], &[Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        assert!((r.value - 2.0).abs() < 1e-15);
        assert!((r.grad[0] - Vec3::new(-2.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn empty_rejected() {
        assert!(chamfer_distance(&[], &[Vec3::zeros()]).is_err());
        assert!(chamfer_distance(&[Vec3::zeros()], &[]).is_err());
    }

    #[test]
    fn far_query_points_find_true_neighbor() {
        let b: Vec<Vec3> = (0..50).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let a = vec![Vec3::new(100.0, 3.0, -2.0), Vec3::new(-40.0, 0.0, 0.0)];
        let h = chamfer_distance(&a, &b).unwrap();
        let r = chamfer_brute_force(&a, &b).unwrap();
        assert_eq!(h.nn_ab, r.nn_ab);
        assert_eq!(h.nn_ba, r.nn_ba);
    }

    #[test]
    fn duplicate_points_tie_to_lowest_index() {
        let b = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let h = chamfer_distance(&[Vec3::zeros()], &b).unwrap();
        assert_eq!(h.nn_ab, vec![0]);
    }
}
