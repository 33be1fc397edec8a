//! Reference implementations shared by the integration tests. None of these
//! call the code paths they are used to check.
#![allow(dead_code)]

use klio_core::geometry::{Pose, Rotation};
use klio_core::pointcloud::{ScanCloud, ScanPoint};
use klio_core::preintegration::{
    transition, ImuSample, Matrix15, Matrix15x12, NavState, StepCarry, Vector12, Vector15,
};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;

pub fn rand_vec(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-s..s),
        rng.random_range(-s..s),
        rng.random_range(-s..s),
    )
}

pub fn random_state(rng: &mut impl Rng, timestamp: f64) -> NavState {
    NavState {
        pose: Pose::new(Rotation::exp(&rand_vec(rng, 3.0)), rand_vec(rng, 10.0)),
        velocity: rand_vec(rng, 5.0),
        gyro_bias: rand_vec(rng, 0.05),
        accel_bias: rand_vec(rng, 0.2),
        timestamp,
    }
}

/// Central differences of `transition` over every error-state and noise
/// direction, measured in the error-state chart of the unperturbed output.
pub fn numeric_jacobians(
    prev: &NavState,
    carry: Option<&StepCarry>,
    sample: &ImuSample,
    gravity: &Vector3<f64>,
    h: f64,
) -> (Matrix15, Matrix15x12) {
    let zero = Vector12::zeros();
    let nominal = transition(prev, carry, sample, gravity, &zero);
    let mut fx = Matrix15::zeros();
    for i in 0..15 {
        let mut d = Vector15::zeros();
        d[i] = h;
        let plus = transition(&prev.boxplus(&d), carry, sample, gravity, &zero);
        let minus = transition(&prev.boxplus(&(-d)), carry, sample, gravity, &zero);
        let col = (plus.boxminus(&nominal) - minus.boxminus(&nominal)) / (2.0 * h);
        fx.set_column(i, &col);
    }
    let mut fw = Matrix15x12::zeros();
    for j in 0..12 {
        let mut w = Vector12::zeros();
        w[j] = h;
        let plus = transition(prev, carry, sample, gravity, &w);
        let minus = transition(prev, carry, sample, gravity, &(-w));
        let col = (plus.boxminus(&nominal) - minus.boxminus(&nominal)) / (2.0 * h);
        fw.set_column(j, &col);
    }
    (fx, fw)
}

/// Largest column-wise relative deviation `max_j ‖a_j − n_j‖∞ / ‖n_j‖∞`,
/// skipping columns that are zero in both.
pub fn column_relative_error<const C: usize>(
    analytic: &nalgebra::SMatrix<f64, 15, C>,
    numeric: &nalgebra::SMatrix<f64, 15, C>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..C {
        let n = numeric.column(j).amax();
        let diff = (analytic.column(j) - numeric.column(j)).amax();
        if n == 0.0 {
            if diff != 0.0 {
                return f64::INFINITY;
            }
            continue;
        }
        worst = worst.max(diff / n);
    }
    worst
}

/// Endpoint of a fine fixed-step integration of the continuous kinematics the
/// discrete propagation describes: on each sample interval the body rate
/// varies linearly from the bias-corrected reading at the angular
/// acceleration implied by the previous reading, and world-frame specific
/// force varies linearly at the implied jerk.
///
/// `prev` holds the sample preceding the batch and the attitude it was
/// applied from.
pub fn fine_integrate(
    start: &NavState,
    prev: Option<(ImuSample, Matrix3<f64>)>,
    batch: &[ImuSample],
    gravity: &Vector3<f64>,
    total_substeps: usize,
) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
    let per_interval = (total_substeps / batch.len()).max(1);
    let mut r = Rotation3::from_matrix_unchecked(*start.pose.rotation.matrix());
    let mut p = start.pose.translation;
    let mut v = start.velocity;
    let mut t = start.timestamp;
    let mut last = prev;
    for sample in batch {
        let dt = sample.timestamp - t;
        let rate = sample.gyro - start.gyro_bias;
        let accel = sample.accel - start.accel_bias;
        let r_start = *r.matrix();
        let world_accel = r_start * accel;
        let (alpha, jerk) = match &last {
            Some((s, r_prev)) => (
                (rate - (s.gyro - start.gyro_bias)) / dt,
                (world_accel - r_prev * (s.accel - start.accel_bias)) / dt,
            ),
            None => (Vector3::zeros(), Vector3::zeros()),
        };
        let h = dt / per_interval as f64;
        for n in 0..per_interval {
            let tau = (n as f64 + 0.5) * h;
            let w = rate + alpha * tau;
            let a = world_accel + jerk * tau + gravity;
            p += v * h + a * (0.5 * h * h);
            v += a * h;
            r *= Rotation3::from_scaled_axis(w * h);
        }
        last = Some((*sample, r_start));
        t = sample.timestamp;
    }
    (*r.matrix(), p, v)
}

pub fn grid(
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    n: usize,
    spacing: f64,
) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(origin + u * (i as f64 * spacing) + v * (j as f64 * spacing));
        }
    }
    out
}

/// Three mutually orthogonal 3 m × 3 m walls sampled every 0.1 m.
pub fn corner_cloud() -> Vec<Vector3<f64>> {
    let mut pts = grid(Vector3::zeros(), Vector3::x(), Vector3::y(), 30, 0.1);
    pts.extend(grid(
        Vector3::new(0.0, 0.0, 0.1),
        Vector3::x(),
        Vector3::z(),
        30,
        0.1,
    ));
    pts.extend(grid(
        Vector3::new(0.0, 0.1, 0.1),
        Vector3::y(),
        Vector3::z(),
        30,
        0.1,
    ));
    pts
}

pub fn scan_of(points: &[Vector3<f64>]) -> ScanCloud {
    ScanCloud::new(
        0.0,
        points.iter().map(|p| ScanPoint::new(*p, 0.0)).collect(),
    )
}

/// Geodesic angle between two rotation matrices. The cosine is clamped so
/// that rounding on nearly equal inputs cannot produce NaN.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let cos = (((a.transpose() * b).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    cos.acos()
}
