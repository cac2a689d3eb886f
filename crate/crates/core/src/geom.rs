//! Quaternion and SO(3) helpers.
//!
//! Quaternions use the Hamilton convention with `(w, x, y, z)` ordering. A
//! quaternion `q_w_b` rotates body-frame vectors into the world frame.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Axis-angle vector; its norm is the rotation angle in radians.
pub type RotationVector<T> = Vector3<T>;

const SMALL_ANGLE: f64 = 1e-8;
const RENORM_DRIFT: f64 = 1e-12;

/// Skew-symmetric cross-product matrix, `skew(a) * b == a x b`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Default for UnitQuat<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> UnitQuat<T> {
    pub fn identity() -> Self {
        Self {
            w: T::one(),
            x: T::zero(),
            y: T::zero(),
            z: T::zero(),
        }
    }

    /// Builds a quaternion from raw components and normalizes it.
    pub fn new_normalize(w: T, x: T, y: T, z: T) -> Result<Self> {
        let q = Self { w, x, y, z };
        let n = q.norm();
        if !n.is_finite() || n <= T::zero() {
            return Err(Error::NonFinite("UnitQuat::new_normalize"));
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Wraps components that are already known to be unit norm.
    pub fn from_components_unchecked(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    /// Accepts components whose norm is within `tol` of one and normalizes them.
    pub fn from_components_checked(w: T, x: T, y: T, z: T, tol: T) -> Result<Self> {
        let q = Self { w, x, y, z };
        let n = q.norm();
        if !n.is_finite() || (n - T::one()).abs() > tol {
            return Err(Error::NotUnitQuaternion {
                norm: n.to_f64_lossy(),
            });
        }
        Ok(q.renormalized())
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn renormalized(self) -> Self {
        let n = self.norm();
        Self {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    fn renormalize_if_drifted(self) -> Self {
        let tol = T::lit(RENORM_DRIFT).max(T::default_epsilon() * T::lit(4.0));
        let n2 = self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z;
        if (n2 - T::one()).abs() > tol {
            self.renormalized()
        } else {
            self
        }
    }

    /// SO(3) exponential map. No finiteness check; see [`quat_from_rotvec`].
    pub fn exp(v: &RotationVector<T>) -> Self {
        let theta2 = v.norm_squared();
        let theta = theta2.sqrt();
        let half = T::lit(0.5);
        if theta < T::lit(SMALL_ANGLE) {
            let w = T::one() - theta2 / T::lit(8.0);
            let k = half - theta2 / T::lit(48.0);
            return Self {
                w,
                x: v.x * k,
                y: v.y * k,
                z: v.z * k,
            }
            .renormalize_if_drifted();
        }
        let (s, c) = (theta * half).sin_cos();
        let k = s / theta;
        Self {
            w: c,
            x: v.x * k,
            y: v.y * k,
            z: v.z * k,
        }
    }

    /// SO(3) logarithm on the angle range `[0, pi]`.
    pub fn log(&self) -> RotationVector<T> {
        let (w, xyz) = if self.w < T::zero() {
            (-self.w, -self.vec_xyz())
        } else {
            (self.w, self.vec_xyz())
        };
        let s = xyz.norm();
        if s < T::lit(SMALL_ANGLE) {
            // angle ~ 2 s / w, third-order term is below f64 resolution here
            return xyz * (T::lit(2.0) / w);
        }
        let angle = T::lit(2.0) * s.atan2(w);
        xyz * (angle / s)
    }

    pub fn vec_xyz(&self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn as_wxyz(&self) -> Vector4<T> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn inverse(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        let u = self.vec_xyz();
        let two = T::lit(2.0);
        let t = u.cross(v) * two;
        v + t * self.w + u.cross(&t)
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<T> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let one = T::one();
        let two = T::lit(2.0);
        Matrix3::new(
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        )
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> T {
        self.log().norm()
    }

    /// Right-perturbation update `self * exp(delta)`.
    pub fn boxplus(&self, delta: &RotationVector<T>) -> Self {
        *self * Self::exp(delta)
    }

    /// Spherical linear interpolation, `t = 0` gives `self`.
    pub fn slerp(&self, other: &Self, t: T) -> Self {
        let rel = self.inverse() * *other;
        *self * Self::exp(&(rel.log() * t))
    }

    /// Matrix `L(q)` such that `q * p == L(q) p` for `p` as `(w, x, y, z)`.
    pub fn left_matrix(&self) -> Matrix4<T> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix4::new(w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w)
    }

    /// Matrix `R(q)` such that `p * q == R(q) p` for `p` as `(w, x, y, z)`.
    pub fn right_matrix(&self) -> Matrix4<T> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix4::new(w, -x, -y, -z, x, w, z, -y, y, -z, w, x, z, y, -x, w)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl<T: Real> Mul for UnitQuat<T> {
    type Output = UnitQuat<T>;

    fn mul(self, b: UnitQuat<T>) -> UnitQuat<T> {
        let a = self;
        UnitQuat {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
        .renormalize_if_drifted()
    }
}

/// Checked exponential map.
pub fn quat_from_rotvec<T: Real>(v: &RotationVector<T>) -> Result<UnitQuat<T>> {
    if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
        return Err(Error::NonFinite("quat_from_rotvec"));
    }
    Ok(UnitQuat::exp(v))
}

pub fn quat_log<T: Real>(q: &UnitQuat<T>) -> RotationVector<T> {
    q.log()
}

pub fn quat_multiply<T: Real>(a: &UnitQuat<T>, b: &UnitQuat<T>) -> UnitQuat<T> {
    *a * *b
}

pub fn quat_rotate<T: Real>(q: &UnitQuat<T>, v: &Vector3<T>) -> Vector3<T> {
    q.rotate(v)
}

/// Right Jacobian of SO(3): `exp(phi + d) ~= exp(phi) * exp(Jr(phi) d)`.
pub fn right_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < T::lit(1e-10) {
        return Matrix3::identity() - k * T::lit(0.5) + k * k * T::lit(1.0 / 6.0);
    }
    let theta = theta2.sqrt();
    let a = (T::one() - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() - k * a + k * k * b
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < T::lit(1e-10) {
        return Matrix3::identity() + k * T::lit(0.5) + k * k * T::lit(1.0 / 12.0);
    }
    let theta = theta2.sqrt();
    let half = theta * T::lit(0.5);
    let c = T::one() / theta2 - (T::one() + theta.cos()) / (T::lit(2.0) * theta * theta.sin());
    // cot form is unstable near pi; fall back to the half-angle identity
    let c = if c.is_finite() {
        c
    } else {
        (T::one() - half / half.tan()) / theta2
    };
    Matrix3::identity() + k * T::lit(0.5) + k * k * c
}
