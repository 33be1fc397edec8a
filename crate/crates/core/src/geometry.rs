//! SO(3) / SE(3) primitives.
//!
//! Tangent vectors are always ordered (rotation, translation). Increments are
//! applied on the right for rotations, `R ⊞ δθ = R · exp(δθ)`, while translations
//! are updated additively in the world frame. The two blocks are never coupled
//! through an SE(3) screw exponential.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Below this angle the exponential and logarithm switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Above `π - NEAR_PI` the logarithm extracts the axis from the symmetric part.
const NEAR_PI: f64 = 1e-2;

pub type Vector6 = SVector<f64, 6>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("non-finite rotation vector ({0}, {1}, {2})")]
    NonFinite(f64, f64, f64),
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Element of SO(3), stored as a rotation matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Exponential map. Non-finite input propagates NaNs; use [`so3_exp`] for
    /// a checked version.
    pub fn exp(v: &Vector3<f64>) -> Self {
        let theta_sq = v.norm_squared();
        let theta = theta_sq.sqrt();
        let k = hat(v);
        let k2 = k * k;
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
        };
        Self(Matrix3::identity() + k * a + k2 * b)
    }

    /// Principal logarithm, `‖result‖ ≤ π`.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let skew = vee(&(m - m.transpose())) * 0.5; // sin(θ)·n
        let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let sin_theta = skew.norm();
        let theta = sin_theta.atan2(cos_theta);

        if theta < SMALL_ANGLE {
            return skew * (1.0 + theta * theta / 6.0);
        }
        if theta < std::f64::consts::PI - NEAR_PI {
            return skew * (theta / sin_theta);
        }

        // Near π: (R + Rᵀ)/2 - cos θ·I = (1 - cos θ)·n nᵀ. Read the axis off the
        // column with the largest diagonal entry.
        let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
        let one_minus_cos = 1.0 - cos_theta;
        let i = (0..3)
            .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
            .unwrap_or(0);
        let mut axis: Vector3<f64> =
            sym.column(i).into_owned() / (sym[(i, i)] * one_minus_cos).sqrt();
        axis /= axis.norm();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        axis * theta
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Roll/pitch/yaw (extrinsic x-y-z) composition `Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self(*nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw).matrix())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    /// Unit quaternion with non-negative scalar part.
    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    /// Largest absolute entry of `RᵀR - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }

    /// Projects back onto SO(3) through the closest unit quaternion.
    pub fn renormalized(&self) -> Self {
        let q = self.to_quaternion();
        let q = UnitQuaternion::new_normalize(q.into_inner());
        Self::from_quaternion(&q)
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.log();
        write!(f, "Rotation(log = [{:.6}, {:.6}, {:.6}])", v.x, v.y, v.z)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    #[inline]
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    #[inline]
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    #[inline]
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Accepted deviation from orthonormality when deserializing.
const SERDE_ORTHONORMAL_TOLERANCE: f64 = 1e-6;

// Serialized as the row-major matrix so that round trips are exact.
impl Serialize for Rotation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let m = &self.0;
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]);
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        let m = Matrix3::from_fn(|i, j| rows[i][j]);
        let orthonormal = (m.transpose() * m - Matrix3::identity()).amax()
            < SERDE_ORTHONORMAL_TOLERANCE
            && m.determinant() > 0.0;
        if !m.iter().all(|c| c.is_finite()) || !orthonormal {
            return Err(serde::de::Error::custom(
                "rotation must be a finite proper orthonormal matrix",
            ));
        }
        Ok(Rotation(m))
    }
}

/// Checked exponential map.
pub fn so3_exp(axis_angle: &Vector3<f64>) -> Result<Rotation, GeometryError> {
    if !axis_angle.iter().all(|c| c.is_finite()) {
        return Err(GeometryError::NonFinite(
            axis_angle.x,
            axis_angle.y,
            axis_angle.z,
        ));
    }
    Ok(Rotation::exp(axis_angle))
}

pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    r.log()
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ)·exp(Jr(φ)·δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Tangent increment ordered (rotation, translation).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_vector(v: &Vector6) -> Self {
        Self {
            rotation: v.fixed_rows::<3>(0).into_owned(),
            translation: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6 {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -(r_inv * self.translation))
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    /// `(R·exp(δθ), t + δt)`.
    pub fn boxplus(&self, delta: &Twist) -> Self {
        Self::new(
            self.rotation * Rotation::exp(&delta.rotation),
            self.translation + delta.translation,
        )
    }

    /// Inverse of [`Pose::boxplus`]: `other.boxplus(&self.boxminus(other)) == self`.
    pub fn boxminus(&self, other: &Pose) -> Twist {
        Twist::new(
            (other.rotation.inverse() * self.rotation).log(),
            self.translation - other.translation,
        )
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.transform_point(&rhs.translation),
        )
    }
}

impl Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        *self * *rhs
    }
}

pub fn transform_point(t: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    t.transform_point(p)
}
