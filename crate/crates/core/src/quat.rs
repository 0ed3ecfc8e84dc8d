//! Quaternion and 3x3 matrix algebra.
//!
//! Quaternions are stored as `[v; s]` (vector part first). The attitude matrix
//! `A(q) = (2s² − 1) I + 2s [v×] + 2 v vᵀ` maps body-frame vectors into the inertial frame,
//! and the product is defined through `q ⊗ = s I₄ + Ω(v)` with
//! `Ω(v) = [[−[v×], v], [−vᵀ, 0]]`, so that `A(q1 ⊗ q2) = A(q2) A(q1)`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Allowed deviation of `|q|` from one before a quaternion is rejected as non-unit.
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    /// Vector part.
    pub v: Vec3,
    /// Scalar part.
    pub s: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quaternion {
    pub fn identity() -> Self {
        Quaternion {
            v: Vec3::zeros(),
            s: 1.0,
        }
    }

    /// Builds a unit quaternion from arbitrary (non-zero, finite) components by normalising them.
    pub fn new(v: Vec3, s: f64) -> Result<Self> {
        let n = (v.norm_squared() + s * s).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid(format!(
                "cannot normalise quaternion with norm {n}"
            )));
        }
        Ok(Quaternion { v: v / n, s: s / n })
    }

    /// Rotation by `angle` about `axis` (which need not be normalised).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) || !angle.is_finite() {
            return Err(Error::invalid("axis must be non-zero and angle finite"));
        }
        let half = 0.5 * angle;
        Ok(Quaternion {
            v: axis * (half.sin() / n),
            s: half.cos(),
        })
    }

    /// Rotation vector `θ n` to quaternion; exact for any magnitude.
    pub fn from_rotation_vector(phi: &Vec3) -> Self {
        let angle = phi.norm();
        if angle < 1e-12 {
            return Quaternion::new(phi * 0.5, 1.0).unwrap_or_default();
        }
        let half = 0.5 * angle;
        Quaternion {
            v: phi * (half.sin() / angle),
            s: half.cos(),
        }
    }

    /// Quaternion whose attitude matrix is `m` (Shepperd's method).
    ///
    /// `m` should be a proper rotation; the result is normalised either way.
    pub fn from_rotation(m: &Mat3) -> Self {
        let tr = m.trace();
        let (v, s) = if tr > m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]) {
            let s = 0.5 * (1.0 + tr).sqrt();
            let k = 0.25 / s;
            (
                Vec3::new(
                    (m[(2, 1)] - m[(1, 2)]) * k,
                    (m[(0, 2)] - m[(2, 0)]) * k,
                    (m[(1, 0)] - m[(0, 1)]) * k,
                ),
                s,
            )
        } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
            let x = 0.5 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            let k = 0.25 / x;
            (
                Vec3::new(x, (m[(0, 1)] + m[(1, 0)]) * k, (m[(0, 2)] + m[(2, 0)]) * k),
                (m[(2, 1)] - m[(1, 2)]) * k,
            )
        } else if m[(1, 1)] >= m[(2, 2)] {
            let y = 0.5 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            let k = 0.25 / y;
            (
                Vec3::new((m[(0, 1)] + m[(1, 0)]) * k, y, (m[(1, 2)] + m[(2, 1)]) * k),
                (m[(0, 2)] - m[(2, 0)]) * k,
            )
        } else {
            let z = 0.5 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            let k = 0.25 / z;
            (
                Vec3::new((m[(0, 2)] + m[(2, 0)]) * k, (m[(1, 2)] + m[(2, 1)]) * k, z),
                (m[(1, 0)] - m[(0, 1)]) * k,
            )
        };
        Quaternion::new(v, s).unwrap_or_default()
    }

    pub fn from_vector4(q: &Vector4<f64>) -> Result<Self> {
        Quaternion::new(Vec3::new(q[0], q[1], q[2]), q[3])
    }

    /// Components as `[v; s]`.
    pub fn to_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.v.x, self.v.y, self.v.z, self.s)
    }

    pub fn norm(&self) -> f64 {
        (self.v.norm_squared() + self.s * self.s).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Quaternion {
            v: -self.v,
            s: self.s,
        }
    }

    /// Rescales to unit norm. The sign of the scalar part is never changed.
    pub fn normalize(&self) -> Self {
        let n = self.norm();
        Quaternion {
            v: self.v / n,
            s: self.s / n,
        }
    }

    /// Representative with a non-negative scalar part (`q` and `−q` are the same attitude).
    pub fn canonicalize(&self) -> Self {
        if self.s < 0.0 {
            Quaternion {
                v: -self.v,
                s: -self.s,
            }
        } else {
            *self
        }
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    /// Attitude matrix `A(q)`. Assumes `self` is unit-norm; see [`rotation_from_quat`] for the
    /// checked variant.
    pub fn rotation(&self) -> Mat3 {
        let v = &self.v;
        let s = self.s;
        Mat3::identity() * (2.0 * s * s - 1.0) + cross_matrix(v) * (2.0 * s) + v * v.transpose() * 2.0
    }

    /// Quaternion product `self ⊗ rhs`.
    pub fn multiply(&self, rhs: &Quaternion) -> Quaternion {
        Quaternion {
            v: rhs.v * self.s - self.v.cross(&rhs.v) + self.v * rhs.s,
            s: self.s * rhs.s - self.v.dot(&rhs.v),
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let c = self.canonicalize();
        2.0 * c.v.norm().atan2(c.s)
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, rhs: Quaternion) -> Quaternion {
        self.multiply(&rhs)
    }
}

fn check_unit(q: &Quaternion) -> Result<()> {
    if !q.is_unit() {
        return Err(Error::invalid(format!(
            "quaternion is not unit-norm (|q| = {})",
            q.norm()
        )));
    }
    Ok(())
}

/// Attitude matrix of a unit quaternion, rejecting inputs that are not unit-norm.
pub fn rotation_from_quat(q: &Quaternion) -> Result<Mat3> {
    check_unit(q)?;
    Ok(q.rotation())
}

/// `q1 ⊗ q2` for unit inputs.
pub fn quat_multiply(q1: &Quaternion, q2: &Quaternion) -> Result<Quaternion> {
    check_unit(q1)?;
    check_unit(q2)?;
    Ok(q1.multiply(q2))
}

/// Skew-symmetric matrix with `cross_matrix(v) * u == v × u`.
pub fn cross_matrix(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// The 4x4 matrix `Ω(v)`; `q ⊗ p = (s I₄ + Ω(v)) p`.
pub fn omega_matrix(v: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-cross_matrix(v)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(v);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-v.transpose()));
    m
}

/// Completes an error-quaternion vector part with the scalar `√(1 − |δq_v|²)`.
pub fn quat_from_error(dqv: &Vec3) -> Result<Quaternion> {
    let n2 = dqv.norm_squared();
    if !n2.is_finite() || n2 > 1.0 {
        return Err(Error::DivergentUpdate { norm: n2.sqrt() });
    }
    Ok(Quaternion {
        v: *dqv,
        s: (1.0 - n2).sqrt(),
    })
}
