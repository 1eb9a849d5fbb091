//! Quaternion, covariance and rigid-transform helpers shared by the renderer and
//! the network heads. Quaternions are stored as `[w, x, y, z]`.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{OdgError, Result};

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Normalizes `q`. Rejects the zero quaternion.
pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let n = quat_norm(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(OdgError::InvalidArgument(format!(
            "quaternion {q:?} cannot be normalized"
        )));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_rotation(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back onto the (unit) quaternion
/// components used to build it.
pub fn rotation_grad_to_quat(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    [g.dot(&dw), g.dot(&dx), g.dot(&dy), g.dot(&dz)]
}

/// Backward of `q / |q|`: maps a gradient on the normalized quaternion onto the raw one.
pub fn normalize_quat_backward(raw: &Quat, grad_unit: &Quat) -> Quat {
    let n = quat_norm(raw);
    if n == 0.0 {
        return [0.0; 4];
    }
    let u = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let d: f64 = (0..4).map(|i| u[i] * grad_unit[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (grad_unit[i] - u[i] * d) / n;
    }
    out
}

/// `R · diag(s²) · Rᵀ` for a (possibly non-unit) quaternion.
pub fn covariance_from(scale: &Vector3<f64>, rot: &Quat) -> Result<Matrix3<f64>> {
    let r = quat_to_rotation(&normalize_quat(rot)?);
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    let cov = r * s2 * r.transpose();
    // exact symmetry; the product is symmetric only up to rounding
    Ok((cov + cov.transpose()) * 0.5)
}

pub fn is_rigid(m: &Matrix4<f64>, tol: f64) -> bool {
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    let bottom = (m[(3, 0)].abs() + m[(3, 1)].abs() + m[(3, 2)].abs() + (m[(3, 3)] - 1.0).abs())
        < tol;
    orth < tol && (r.determinant() - 1.0).abs() < tol && bottom && m.iter().all(|v| v.is_finite())
}

/// Inverse of a rigid transform without a general matrix inversion.
pub fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let r = m.fixed_view::<3, 3>(0, 0).transpose();
    let t = m.fixed_view::<3, 1>(0, 3).into_owned();
    let ti = -(r * t);
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&ti);
    out
}

pub fn transform_point(m: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let r = m.fixed_view::<3, 3>(0, 0);
    let t = m.fixed_view::<3, 1>(0, 3);
    r * p + t
}

/// Rigid transform from a rotation about +z (yaw), a translation and nothing else.
pub fn yaw_translation(yaw: f64, t: Vector3<f64>) -> Matrix4<f64> {
    let (s, c) = yaw.sin_cos();
    let mut m = Matrix4::identity();
    m[(0, 0)] = c;
    m[(0, 1)] = -s;
    m[(1, 0)] = s;
    m[(1, 1)] = c;
    m[(0, 3)] = t.x;
    m[(1, 3)] = t.y;
    m[(2, 3)] = t.z;
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rotation_is_orthonormal() {
        let q = normalize_quat(&[0.3, -0.4, 0.8, 0.1]).unwrap();
        let r = quat_to_rotation(&q);
        assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_grad_matches_finite_differences() {
        let q = [0.7, 0.2, -0.5, 0.3];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 0.9, 0.4, -0.2);
        let analytic = rotation_grad_to_quat(&q, &g);
        let h = 1e-6;
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (quat_to_rotation(&qp).dot(&g) - quat_to_rotation(&qm).dot(&g)) / (2.0 * h);
            assert_relative_eq!(analytic[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(normalize_quat(&[0.0; 4]).is_err());
    }

    #[test]
    fn rigid_inverse_roundtrip() {
        let m = yaw_translation(0.7, Vector3::new(1.0, -2.0, 0.5));
        assert!(is_rigid(&m, 1e-9));
        assert_relative_eq!(m * rigid_inverse(&m), Matrix4::identity(), epsilon = 1e-12);
    }
}
