//! IMU propagation between two scan timestamps.
//!
//! Each sample `k` drives the interval `(t_{k-1}, t_k]`. Besides the bias-corrected
//! rate and specific force, the step uses an angular acceleration and a world-frame
//! linear jerk formed from the previous sample, so consecutive samples describe a
//! piecewise-linear signal rather than a zero-order hold.
//!
//! The error state is 15-dimensional, ordered (rotation, translation, velocity,
//! gyro bias, accel bias). Rotation errors are right perturbations `R·exp(δθ)`;
//! everything else is additive. The noise vector is 12-dimensional, ordered
//! (gyro noise, accel noise, gyro bias walk, accel bias walk).

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{hat, right_jacobian, Pose, Rotation};

pub const STATE_DIM: usize = 15;
pub const NOISE_DIM: usize = 12;

pub type Matrix15 = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type Matrix15x12 = SMatrix<f64, STATE_DIM, NOISE_DIM>;
pub type Vector15 = SVector<f64, STATE_DIM>;
pub type Vector12 = SVector<f64, NOISE_DIM>;

/// Offsets of the error-state blocks.
pub mod block {
    pub const ROT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const GYRO_BIAS: usize = 9;
    pub const ACCEL_BIAS: usize = 12;
}

pub const DEFAULT_GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];
pub const DEFAULT_MAX_GAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreintegrationError {
    #[error("IMU timestamp {sample} does not advance past {prev}")]
    NonIncreasingTimestamp { prev: f64, sample: f64 },
    #[error("IMU gap of {gap:.4} s exceeds the {max:.4} s limit")]
    MeasurementGap { gap: f64, max: f64 },
    #[error("no IMU samples available for prediction")]
    EmptyBatch,
    #[error("non-finite IMU sample at t = {0}")]
    NonFiniteSample(f64),
    #[error("covariance propagation produced non-finite values at t = {timestamp} (trace before {trace_before})")]
    NonFiniteCovariance { timestamp: f64, trace_before: f64 },
    #[error("process noise scale must be positive, got {0}")]
    InvalidNoise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Angular rate [rad/s], body frame.
    pub gyro: Vector3<f64>,
    /// Specific force [m/s²], body frame.
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(timestamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self {
            timestamp,
            gyro,
            accel,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.gyro.iter().all(|v| v.is_finite())
            && self.accel.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NavState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub timestamp: f64,
}

impl NavState {
    pub fn at_rest(pose: Pose, timestamp: f64) -> Self {
        Self {
            pose,
            timestamp,
            ..Default::default()
        }
    }

    pub fn rotation(&self) -> &Rotation {
        &self.pose.rotation
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.pose.translation
    }

    /// Applies an error-state increment.
    pub fn boxplus(&self, delta: &Vector15) -> NavState {
        let d = |i: usize| -> Vector3<f64> { delta.fixed_rows::<3>(i).into_owned() };
        NavState {
            pose: Pose::new(
                self.pose.rotation * Rotation::exp(&d(block::ROT)),
                self.pose.translation + d(block::POS),
            ),
            velocity: self.velocity + d(block::VEL),
            gyro_bias: self.gyro_bias + d(block::GYRO_BIAS),
            accel_bias: self.accel_bias + d(block::ACCEL_BIAS),
            timestamp: self.timestamp,
        }
    }

    /// Error-state difference `self ⊟ other`.
    pub fn boxminus(&self, other: &NavState) -> Vector15 {
        let mut out = Vector15::zeros();
        out.fixed_rows_mut::<3>(block::ROT)
            .copy_from(&(other.pose.rotation.inverse() * self.pose.rotation).log());
        out.fixed_rows_mut::<3>(block::POS)
            .copy_from(&(self.pose.translation - other.pose.translation));
        out.fixed_rows_mut::<3>(block::VEL)
            .copy_from(&(self.velocity - other.velocity));
        out.fixed_rows_mut::<3>(block::GYRO_BIAS)
            .copy_from(&(self.gyro_bias - other.gyro_bias));
        out.fixed_rows_mut::<3>(block::ACCEL_BIAS)
            .copy_from(&(self.accel_bias - other.accel_bias));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.pose.rotation.matrix().iter().all(|v| v.is_finite())
            && self.pose.translation.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.gyro_bias.iter().all(|v| v.is_finite())
            && self.accel_bias.iter().all(|v| v.is_finite())
            && self.timestamp.is_finite()
    }
}

/// 15×15 covariance over the error state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateCovariance(pub Matrix15);

impl StateCovariance {
    pub fn zeros() -> Self {
        Self(Matrix15::zeros())
    }

    pub fn scaled_identity(s: f64) -> Self {
        Self(Matrix15::identity() * s)
    }

    pub fn matrix(&self) -> &Matrix15 {
        &self.0
    }

    pub fn symmetrized(m: Matrix15) -> Self {
        Self((m + m.transpose()) * 0.5)
    }

    pub fn diagonal(&self) -> Vector15 {
        self.0.diagonal()
    }

    pub fn asymmetry(&self) -> f64 {
        (self.0 - self.0.transpose()).amax()
    }
}

/// Process noise `Q = q·I` and the gravity vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub q: f64,
    pub gravity: Vector3<f64>,
}

impl NoiseParams {
    pub fn new(q: f64, gravity: Vector3<f64>) -> Result<Self, PreintegrationError> {
        if !(q > 0.0) || !q.is_finite() {
            return Err(PreintegrationError::InvalidNoise(q));
        }
        Ok(Self { q, gravity })
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            q: 1.0,
            gravity: Vector3::from(DEFAULT_GRAVITY),
        }
    }
}

/// The sample consumed by the previous step, together with the attitude it was
/// applied from. Needed to form the angular acceleration and jerk terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCarry {
    pub sample: ImuSample,
    pub rotation: Rotation,
}

/// Intermediate quantities of one step that both the transition and its
/// Jacobians need.
struct StepTerms {
    dt: f64,
    rate: Vector3<f64>,
    accel: Vector3<f64>,
    angular_accel: Vector3<f64>,
    jerk: Vector3<f64>,
    has_carry: bool,
}

fn step_terms(
    prev: &NavState,
    carry: Option<&StepCarry>,
    sample: &ImuSample,
    noise: &Vector12,
) -> StepTerms {
    let dt = sample.timestamp - prev.timestamp;
    let n_gyro: Vector3<f64> = noise.fixed_rows::<3>(0).into_owned();
    let n_accel: Vector3<f64> = noise.fixed_rows::<3>(3).into_owned();
    let rate = sample.gyro - prev.gyro_bias - n_gyro;
    let accel = sample.accel - prev.accel_bias - n_accel;
    let (angular_accel, jerk) = match carry {
        Some(c) => {
            let prev_rate = c.sample.gyro - prev.gyro_bias;
            let prev_world_accel = c.rotation * (c.sample.accel - prev.accel_bias);
            (
                (rate - prev_rate) / dt,
                (prev.pose.rotation * accel - prev_world_accel) / dt,
            )
        }
        None => (Vector3::zeros(), Vector3::zeros()),
    };
    StepTerms {
        dt,
        rate,
        accel,
        angular_accel,
        jerk,
        has_carry: carry.is_some(),
    }
}

/// The transition `f(x, u, w)` with an explicit noise vector. With `w = 0` this
/// is [`propagate_step`] without the timestamp checks.
pub fn transition(
    prev: &NavState,
    carry: Option<&StepCarry>,
    sample: &ImuSample,
    gravity: &Vector3<f64>,
    noise: &Vector12,
) -> NavState {
    let s = step_terms(prev, carry, sample, noise);
    let dt = s.dt;
    let dt2 = dt * dt;
    let r = &prev.pose.rotation;
    let world_accel = r * &s.accel;

    let rotation =
        *r * Rotation::exp(&(s.rate * dt)) * Rotation::exp(&(s.angular_accel * (0.5 * dt2)));
    let position = prev.pose.translation
        + prev.velocity * dt
        + gravity * (0.5 * dt2)
        + world_accel * (0.5 * dt2)
        + s.jerk * (dt2 * dt / 6.0);
    let velocity = prev.velocity + gravity * dt + world_accel * dt + s.jerk * (0.5 * dt2);

    NavState {
        pose: Pose::new(rotation, position),
        velocity,
        gyro_bias: prev.gyro_bias + noise.fixed_rows::<3>(6),
        accel_bias: prev.accel_bias + noise.fixed_rows::<3>(9),
        timestamp: sample.timestamp,
    }
}

fn check_step(
    prev: &NavState,
    sample: &ImuSample,
    max_gap: f64,
) -> Result<(), PreintegrationError> {
    if !sample.is_finite() {
        return Err(PreintegrationError::NonFiniteSample(sample.timestamp));
    }
    let dt = sample.timestamp - prev.timestamp;
    if !(dt > 0.0) {
        return Err(PreintegrationError::NonIncreasingTimestamp {
            prev: prev.timestamp,
            sample: sample.timestamp,
        });
    }
    if dt > max_gap {
        return Err(PreintegrationError::MeasurementGap {
            gap: dt,
            max: max_gap,
        });
    }
    Ok(())
}

/// Mean propagation of one IMU step with the noise set to zero.
pub fn propagate_step(
    prev: &NavState,
    carry: Option<&StepCarry>,
    sample: &ImuSample,
    noise: &NoiseParams,
    max_gap: f64,
) -> Result<NavState, PreintegrationError> {
    check_step(prev, sample, max_gap)?;
    Ok(transition(
        prev,
        carry,
        sample,
        &noise.gravity,
        &Vector12::zeros(),
    ))
}

/// Analytic `(F_x, F_w)` of [`transition`] at `w = 0`.
pub fn step_jacobians(
    prev: &NavState,
    carry: Option<&StepCarry>,
    sample: &ImuSample,
) -> (Matrix15, Matrix15x12) {
    use block::*;
    let s = step_terms(prev, carry, sample, &Vector12::zeros());
    let dt = s.dt;
    let dt2 = dt * dt;
    let c = if s.has_carry { 1.0 } else { 0.0 };
    let r = prev.pose.rotation.matrix();

    let rate_step = s.rate * dt;
    let spin_step = s.angular_accel * (0.5 * dt2);
    let exp_rate = Rotation::exp(&rate_step);
    let exp_spin = Rotation::exp(&spin_step);
    let spin_t = exp_spin.matrix().transpose();
    let jr_rate = right_jacobian(&rate_step);
    let jr_spin = right_jacobian(&spin_step);

    // World-frame specific force enters position with ½Δt² (+⅙Δt² through the jerk)
    // and velocity with Δt (+½Δt through the jerk).
    let kp = 0.5 * dt2 + c * dt2 / 6.0;
    let kv = dt + c * 0.5 * dt;
    let r_accel_hat = r * hat(&s.accel);
    let prev_rot = carry
        .map(|cr| *cr.rotation.matrix())
        .unwrap_or_else(Matrix3::zeros);

    let mut fx = Matrix15::identity();
    let step_rot = exp_rate * exp_spin;
    fx.fixed_view_mut::<3, 3>(ROT, ROT)
        .copy_from(&step_rot.matrix().transpose());
    fx.fixed_view_mut::<3, 3>(ROT, GYRO_BIAS)
        .copy_from(&(-spin_t * jr_rate * dt));

    fx.fixed_view_mut::<3, 3>(POS, ROT)
        .copy_from(&(-r_accel_hat * kp));
    fx.fixed_view_mut::<3, 3>(POS, VEL)
        .copy_from(&(Matrix3::identity() * dt));
    fx.fixed_view_mut::<3, 3>(POS, ACCEL_BIAS)
        .copy_from(&(-r * kp + prev_rot * (c * dt2 / 6.0)));

    fx.fixed_view_mut::<3, 3>(VEL, ROT)
        .copy_from(&(-r_accel_hat * kv));
    fx.fixed_view_mut::<3, 3>(VEL, ACCEL_BIAS)
        .copy_from(&(-r * kv + prev_rot * (c * 0.5 * dt)));

    let mut fw = Matrix15x12::zeros();
    fw.fixed_view_mut::<3, 3>(ROT, 0)
        .copy_from(&(-spin_t * jr_rate * dt - jr_spin * (c * 0.5 * dt)));
    fw.fixed_view_mut::<3, 3>(POS, 3).copy_from(&(-r * kp));
    fw.fixed_view_mut::<3, 3>(VEL, 3).copy_from(&(-r * kv));
    fw.fixed_view_mut::<3, 3>(GYRO_BIAS, 6)
        .copy_from(&Matrix3::identity());
    fw.fixed_view_mut::<3, 3>(ACCEL_BIAS, 9)
        .copy_from(&Matrix3::identity());

    (fx, fw)
}

/// `Σ' = F_x Σ F_xᵀ + q·F_w F_wᵀ`, re-symmetrized.
pub fn propagate_covariance_step(
    cov: &StateCovariance,
    fx: &Matrix15,
    fw: &Matrix15x12,
    noise: &NoiseParams,
    timestamp: f64,
) -> Result<StateCovariance, PreintegrationError> {
    let next = fx * cov.0 * fx.transpose() + fw * fw.transpose() * noise.q;
    if !next.iter().all(|v| v.is_finite()) {
        return Err(PreintegrationError::NonFiniteCovariance {
            timestamp,
            trace_before: cov.0.trace(),
        });
    }
    Ok(StateCovariance::symmetrized(next))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub state: NavState,
    /// Bias-corrected body rate in effect around this state.
    pub angular_rate: Vector3<f64>,
}

/// The `K+1` states visited while preintegrating; the last one is the prediction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PreintegrationTrajectory {
    pub entries: Vec<TrajectoryEntry>,
}

impl PreintegrationTrajectory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_state(&self) -> Option<&NavState> {
        self.entries.last().map(|e| &e.state)
    }

    /// Index of the entry closest in time to `t` (earlier entry on ties).
    pub fn nearest_index(&self, t: f64) -> Option<usize> {
        if self.entries.is_empty() {
            return None;
        }
        let i = self.entries.partition_point(|e| e.state.timestamp < t);
        if i == 0 {
            return Some(0);
        }
        if i == self.entries.len() {
            return Some(i - 1);
        }
        let before = t - self.entries[i - 1].state.timestamp;
        let after = self.entries[i].state.timestamp - t;
        Some(if after < before { i } else { i - 1 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preintegration {
    pub trajectory: PreintegrationTrajectory,
    pub covariance: StateCovariance,
    /// Carry-over for the first step of the next batch.
    pub carry: Option<StepCarry>,
}

impl Preintegration {
    pub fn predicted(&self) -> &NavState {
        self.trajectory
            .last_state()
            .expect("preintegration trajectory is never empty")
    }

    /// Holds the last sample until `end_time` so the prediction lands exactly on
    /// the scan timestamp. No-op when already there.
    pub fn extend_to(
        &mut self,
        end_time: f64,
        noise: &NoiseParams,
        max_gap: f64,
    ) -> Result<(), PreintegrationError> {
        let last = *self.predicted();
        if end_time <= last.timestamp {
            return Ok(());
        }
        let Some(carry) = self.carry else {
            return Ok(());
        };
        let held = ImuSample::new(end_time, carry.sample.gyro, carry.sample.accel);
        check_step(&last, &held, max_gap)?;
        let (fx, fw) = step_jacobians(&last, None, &held);
        self.covariance = propagate_covariance_step(&self.covariance, &fx, &fw, noise, end_time)?;
        let next = transition(&last, None, &held, &noise.gravity, &Vector12::zeros());
        self.trajectory.entries.push(TrajectoryEntry {
            state: next,
            angular_rate: held.gyro - last.gyro_bias,
        });
        self.carry = Some(StepCarry {
            sample: held,
            rotation: last.pose.rotation,
        });
        Ok(())
    }
}

/// Propagates `start` and `start_cov` through `batch`.
pub fn preintegrate_batch(
    start: &NavState,
    start_cov: &StateCovariance,
    batch: &[ImuSample],
    carry: Option<StepCarry>,
    noise: &NoiseParams,
    max_gap: f64,
) -> Result<Preintegration, PreintegrationError> {
    let first = batch.first().ok_or(PreintegrationError::EmptyBatch)?;
    let mut entries = Vec::with_capacity(batch.len() + 1);
    entries.push(TrajectoryEntry {
        state: *start,
        angular_rate: first.gyro - start.gyro_bias,
    });

    let mut state = *start;
    let mut cov = *start_cov;
    let mut carry = carry;
    for sample in batch {
        check_step(&state, sample, max_gap)?;
        let (fx, fw) = step_jacobians(&state, carry.as_ref(), sample);
        cov = propagate_covariance_step(&cov, &fx, &fw, noise, sample.timestamp)?;
        let next = transition(
            &state,
            carry.as_ref(),
            sample,
            &noise.gravity,
            &Vector12::zeros(),
        );
        entries.push(TrajectoryEntry {
            state: next,
            angular_rate: sample.gyro - state.gyro_bias,
        });
        carry = Some(StepCarry {
            sample: *sample,
            rotation: state.pose.rotation,
        });
        state = next;
    }

    Ok(Preintegration {
        trajectory: PreintegrationTrajectory { entries },
        covariance: cov,
        carry,
    })
}
