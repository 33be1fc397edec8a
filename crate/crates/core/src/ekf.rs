//! Full-state measurement construction and the Kalman update on the error state.

use nalgebra::{SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::preintegration::{block, ImuSample, Matrix15, NavState, StateCovariance, Vector15};
use crate::scan_matching::Matrix6x6;

/// Variance assigned to masked measurement blocks.
pub const MASKED_VARIANCE: f64 = 1e12;
pub const GYRO_BIAS_INNOVATION_LIMIT: f64 = 0.5;
pub const ACCEL_BIAS_INNOVATION_LIMIT: f64 = 2.0;
/// Hessian eigenvalues are floored at this fraction of the largest one before inversion.
pub const HESSIAN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EkfError {
    #[error("measurement interval must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("innovation covariance is not positive definite (condition number {condition:e})")]
    Singular { condition: f64 },
    #[error("measurement noise {name} must be positive, got {value}")]
    InvalidNoise { name: &'static str, value: f64 },
    #[error("measurement block {0} is not finite")]
    NonFinite(&'static str),
}

/// Which optional blocks of a [`Measurement`] carry information. The pose is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementMask {
    pub velocity: bool,
    pub gyro_bias: bool,
    pub accel_bias: bool,
}

impl MeasurementMask {
    pub const FULL: Self = Self {
        velocity: true,
        gyro_bias: true,
        accel_bias: true,
    };
    pub const POSE_ONLY: Self = Self {
        velocity: false,
        gyro_bias: false,
        accel_bias: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub mask: MeasurementMask,
}

impl Measurement {
    pub fn pose_only(pose: Pose) -> Self {
        Self {
            pose,
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            mask: MeasurementMask::POSE_ONLY,
        }
    }

    pub fn as_state(&self, timestamp: f64) -> NavState {
        NavState {
            pose: self.pose,
            velocity: self.velocity,
            gyro_bias: self.gyro_bias,
            accel_bias: self.accel_bias,
            timestamp,
        }
    }

    fn check_finite(&self) -> Result<(), EkfError> {
        let pose_ok = self.pose.translation.iter().all(|x| x.is_finite())
            && self.pose.rotation.matrix().iter().all(|x| x.is_finite());
        if !pose_ok {
            return Err(EkfError::NonFinite("pose"));
        }
        let blocks = [
            (self.mask.velocity, &self.velocity, "velocity"),
            (self.mask.gyro_bias, &self.gyro_bias, "gyro bias"),
            (self.mask.accel_bias, &self.accel_bias, "accel bias"),
        ];
        for (present, v, name) in blocks {
            if present && !v.iter().all(|x| x.is_finite()) {
                return Err(EkfError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Scaling of each measurement block's covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementNoise {
    /// Multiplies the inverse registration Hessian.
    pub sigma_p_sq: f64,
    pub sigma_v_sq: f64,
    pub sigma_omega_sq: f64,
    pub sigma_a_sq: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self {
            sigma_p_sq: 100.0,
            sigma_v_sq: 0.1,
            sigma_omega_sq: 0.1,
            sigma_a_sq: 0.1,
        }
    }
}

impl MeasurementNoise {
    pub fn validate(&self) -> Result<(), EkfError> {
        for (name, value) in [
            ("sigma_p_sq", self.sigma_p_sq),
            ("sigma_v_sq", self.sigma_v_sq),
            ("sigma_omega_sq", self.sigma_omega_sq),
            ("sigma_a_sq", self.sigma_a_sq),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EkfError::InvalidNoise { name, value });
            }
        }
        Ok(())
    }
}

/// What is retained from the previous scan to form velocity and bias measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreviousMatch {
    pub pose: Pose,
    /// Velocity measurement built at the previous scan, if one was.
    pub velocity: Option<Vector3<f64>>,
}

/// Mean gyro and accelerometer readings, `None` for an empty batch.
pub fn imu_means(batch: &[ImuSample]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    if batch.is_empty() {
        return None;
    }
    let n = batch.len() as f64;
    let (g, a) = batch
        .iter()
        .fold((Vector3::zeros(), Vector3::zeros()), |(g, a), s| {
            (g + s.gyro, a + s.accel)
        });
    Some((g / n, a / n))
}

/// Builds the full-state measurement from the current registration pose and
/// the previous one.
///
/// Without a previous match only the pose is observed. The accelerometer bias
/// additionally needs the previous velocity measurement, and both biases need
/// a non-empty IMU batch.
pub fn build_measurement(
    current: &Pose,
    previous: Option<&PreviousMatch>,
    imu_batch: &[ImuSample],
    gravity: &Vector3<f64>,
    dt: f64,
) -> Result<Measurement, EkfError> {
    if !(dt > 0.0) {
        return Err(EkfError::NonPositiveInterval(dt));
    }
    let mut z = Measurement::pose_only(*current);
    let Some(prev) = previous else {
        return Ok(z);
    };
    z.velocity = (current.translation - prev.pose.translation) / dt;
    z.mask.velocity = true;
    if let Some((gyro_mean, accel_mean)) = imu_means(imu_batch) {
        let rel = prev.pose.rotation.inverse() * current.rotation;
        z.gyro_bias = gyro_mean - rel.log() / dt;
        z.mask.gyro_bias = true;
        if let Some(prev_velocity) = prev.velocity {
            let dv = z.velocity - prev_velocity - gravity * dt;
            z.accel_bias = accel_mean - (prev.pose.rotation.inverse() * dv) / dt;
            z.mask.accel_bias = true;
        }
    }
    z.check_finite()?;
    Ok(z)
}

/// Block-diagonal measurement covariance in error-state order.
pub fn build_measurement_noise(hessian: &Matrix6x6, noise: &MeasurementNoise) -> Matrix15 {
    let mut r = Matrix15::zeros();
    let pose_block = floored_inverse(hessian) * noise.sigma_p_sq;
    r.fixed_view_mut::<6, 6>(0, 0).copy_from(&pose_block);
    for (start, value) in [
        (block::VEL, noise.sigma_v_sq),
        (block::GYRO_BIAS, noise.sigma_omega_sq),
        (block::ACCEL_BIAS, noise.sigma_a_sq),
    ] {
        for i in start..start + 3 {
            r[(i, i)] = value;
        }
    }
    r
}

/// Inverse of a symmetric matrix with eigenvalues floored at
/// `HESSIAN_FLOOR · λ_max`. A zero matrix maps to a masked pose block.
pub fn floored_inverse(h: &Matrix6x6) -> Matrix6x6 {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || !max.is_finite() {
        return Matrix6x6::identity() * MASKED_VARIANCE;
    }
    let floor = HESSIAN_FLOOR * max;
    let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    let v = &eig.eigenvectors;
    let m = v * Matrix6x6::from_diagonal(&inv) * v.transpose();
    (m + m.transpose()) * 0.5
}

/// Measurement minus prediction on the error state, with masked blocks zeroed
/// and bias blocks clamped.
pub fn innovation(predicted: &NavState, z: &Measurement) -> Vector15 {
    let mut nu = z.as_state(predicted.timestamp).boxminus(predicted);
    let masks = [
        (z.mask.velocity, block::VEL),
        (z.mask.gyro_bias, block::GYRO_BIAS),
        (z.mask.accel_bias, block::ACCEL_BIAS),
    ];
    for (present, start) in masks {
        if !present {
            nu.fixed_rows_mut::<3>(start).fill(0.0);
        }
    }
    for i in 0..3 {
        let g = &mut nu[block::GYRO_BIAS + i];
        *g = g.clamp(-GYRO_BIAS_INNOVATION_LIMIT, GYRO_BIAS_INNOVATION_LIMIT);
        let a = &mut nu[block::ACCEL_BIAS + i];
        *a = a.clamp(-ACCEL_BIAS_INNOVATION_LIMIT, ACCEL_BIAS_INNOVATION_LIMIT);
    }
    nu
}

fn apply_mask(r: &Matrix15, mask: &MeasurementMask) -> Matrix15 {
    let mut r = *r;
    for (present, start) in [
        (mask.velocity, block::VEL),
        (mask.gyro_bias, block::GYRO_BIAS),
        (mask.accel_bias, block::ACCEL_BIAS),
    ] {
        if present {
            continue;
        }
        for i in start..start + 3 {
            r.row_mut(i).fill(0.0);
            r.column_mut(i).fill(0.0);
            r[(i, i)] = MASKED_VARIANCE;
        }
    }
    r
}

/// `x = x̂ ⊞ K(z ⊟ x̂)`, `Σ = (I − K)Σ̂` with `K = Σ̂(R + Σ̂)⁻¹`.
pub fn kalman_update(
    predicted: &NavState,
    predicted_cov: &StateCovariance,
    z: &Measurement,
    r: &Matrix15,
) -> Result<(NavState, StateCovariance), EkfError> {
    let sigma = &predicted_cov.0;
    let r = apply_mask(r, &z.mask);
    let s = r + sigma;
    let s = (s + s.transpose()) * 0.5;
    let Some(chol) = s.cholesky() else {
        let eig = SymmetricEigen::new(s).eigenvalues;
        let (lo, hi) = (
            eig.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs())),
            eig.amax(),
        );
        return Err(EkfError::Singular { condition: hi / lo });
    };
    // K = Σ̂ S⁻¹ = (S⁻¹ Σ̂)ᵀ since both are symmetric.
    let gain = chol.solve(sigma).transpose();
    let nu = innovation(predicted, z);
    let state = predicted.boxplus(&(gain * nu));
    let posterior = (Matrix15::identity() - gain) * sigma;
    Ok((state, StateCovariance::symmetrized(posterior)))
}
