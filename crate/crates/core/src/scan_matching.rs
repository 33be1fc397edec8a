//! Motion compensation and GICP registration against the local map.

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{hat, Pose, Rotation, Twist, Vector6};
use crate::kdtree::KdTree;
use crate::pointcloud::{
    regularize_plane, sample_covariances, CloudError, MapCloud, ScanCloud, ScanPoint,
};
use crate::preintegration::PreintegrationTrajectory;

pub const DEFAULT_GATE: f64 = 0.5;
pub const DEFAULT_MAX_ITERATIONS: usize = 30;
pub const MIN_CORRESPONDENCES: usize = 10;
const INCREMENT_TOLERANCE: f64 = 1e-6;
const RELATIVE_COST_TOLERANCE: f64 = 1e-9;
const MAX_HALVINGS: usize = 8;

pub type Matrix6x6 = Matrix6<f64>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("registration failed: {found} gated correspondences, need {MIN_CORRESPONDENCES}")]
    TooFewCorrespondences { found: usize },
    #[error("registration cost became non-finite")]
    NonFiniteCost,
    #[error("source cloud is empty")]
    EmptySource,
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// Rigid transform from the LiDAR frame into the IMU frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Extrinsics {
    pub imu_from_lidar: Pose,
}

impl Extrinsics {
    pub fn new(imu_from_lidar: Pose) -> Self {
        Self { imu_from_lidar }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deskewed {
    /// Points in the frame of the predicted pose.
    pub cloud: ScanCloud,
    /// Set when no trajectory was available and only extrinsics were applied.
    pub degraded: bool,
}

/// Moves every point into the predicted end-of-sweep body frame using the
/// body pose at the point's capture time.
///
/// The capture pose is the nearest trajectory state extrapolated at constant
/// linear and angular velocity over the remaining time difference.
pub fn deskew(
    cloud: &ScanCloud,
    trajectory: &PreintegrationTrajectory,
    predicted: &Pose,
    extrinsics: &Extrinsics,
) -> Deskewed {
    let to_imu = &extrinsics.imu_from_lidar;
    if trajectory.is_empty() {
        log::warn!(
            "deskew at t={} without a trajectory; applying extrinsics only",
            cloud.timestamp
        );
        let points = cloud
            .points
            .iter()
            .map(|p| ScanPoint {
                position: to_imu.transform_point(&p.position),
                ..*p
            })
            .collect();
        return Deskewed {
            cloud: ScanCloud::new(cloud.timestamp, points),
            degraded: true,
        };
    }

    let predicted_inv = predicted.inverse();
    let mut cached: Option<(usize, f64, Pose)> = None;
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let t = cloud.timestamp - p.time_offset;
            let k = trajectory.nearest_index(t).expect("non-empty trajectory");
            let capture = match cached {
                Some((ck, ct, pose)) if ck == k && ct == t => pose,
                _ => {
                    let entry = &trajectory.entries[k];
                    let dt = t - entry.state.timestamp;
                    let state_pose = &entry.state.pose;
                    let pose = Pose::new(
                        state_pose.rotation * Rotation::exp(&(entry.angular_rate * dt)),
                        state_pose.translation + entry.state.velocity * dt,
                    );
                    let to_pred = predicted_inv * pose;
                    cached = Some((k, t, to_pred));
                    to_pred
                }
            };
            ScanPoint {
                position: capture.transform_point(&to_imu.transform_point(&p.position)),
                ..*p
            }
        })
        .collect();
    Deskewed {
        cloud: ScanCloud::new(cloud.timestamp, points),
        degraded: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GicpParams {
    /// Correspondence gate on `‖q − T·p‖` [m].
    pub gate: f64,
    pub max_iterations: usize,
    pub k_neighbors: usize,
}

impl Default for GicpParams {
    fn default() -> Self {
        Self {
            gate: DEFAULT_GATE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            k_neighbors: crate::pointcloud::DEFAULT_K_NEIGHBORS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Body pose in the world frame.
    pub pose: Pose,
    /// Gauss-Newton normal matrix at the final pose, tangent order (rotation, translation).
    pub hessian: Matrix6x6,
    pub correspondence_rate: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_cost: f64,
}

/// Source points with plane-regularized covariances, computed once per scan.
#[derive(Debug, Clone)]
pub struct GicpSource {
    pub points: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
}

impl GicpSource {
    pub fn new(points: Vec<Vector3<f64>>, k_neighbors: usize) -> Result<Self, CloudError> {
        let tree = KdTree::new(points);
        let covariances = sample_covariances(&tree, k_neighbors)?
            .iter()
            .map(regularize_plane)
            .collect();
        Ok(Self {
            points: tree.points().to_vec(),
            covariances,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Cost, normal equations and match count at one pose.
#[derive(Debug, Clone, Copy)]
struct Linearization {
    cost: f64,
    hessian: Matrix6x6,
    gradient: Vector6,
    matches: usize,
}

fn linearize(source: &GicpSource, map: &MapCloud, pose: &Pose, gate: f64) -> Linearization {
    let r = pose.rotation.matrix();
    let gate_sq = gate * gate;
    let map_points = map.points();
    let map_covs = map.covariances();
    let mut lin = Linearization {
        cost: 0.0,
        hessian: Matrix6x6::zeros(),
        gradient: Vector6::zeros(),
        matches: 0,
    };
    for (p, cp) in source.points.iter().zip(&source.covariances) {
        let transformed = r * p + pose.translation;
        let Some((j, _)) = map.nearest_within(&transformed, gate_sq) else {
            continue;
        };
        let combined = map_covs[j] + r * cp * r.transpose();
        let Some(w) = combined.try_inverse() else {
            continue;
        };
        let d = map_points[j] - transformed;
        // d(q - R exp(δθ) p - t - δt) = [R[p]x, -I] δ
        let mut jac = nalgebra::Matrix3x6::<f64>::zeros();
        jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * hat(p)));
        jac.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-Matrix3::identity()));
        let jtw = jac.transpose() * w;
        lin.hessian += jtw * jac;
        lin.gradient += jtw * d;
        lin.cost += d.dot(&(w * d));
        lin.matches += 1;
    }
    lin.hessian = (lin.hessian + lin.hessian.transpose()) * 0.5;
    lin
}

/// Aligns `source` to `map` starting from `initial`.
pub fn gicp_align(
    source: &ScanCloud,
    map: &MapCloud,
    initial: &Pose,
    params: &GicpParams,
) -> Result<MatchResult, MatchError> {
    if source.is_empty() {
        return Err(MatchError::EmptySource);
    }
    let prepared = GicpSource::new(source.positions(), params.k_neighbors)?;
    gicp_align_prepared(&prepared, map, initial, params)
}

/// [`gicp_align`] for a source whose covariances are already known.
pub fn gicp_align_prepared(
    source: &GicpSource,
    map: &MapCloud,
    initial: &Pose,
    params: &GicpParams,
) -> Result<MatchResult, MatchError> {
    if source.is_empty() {
        return Err(MatchError::EmptySource);
    }
    if map.is_empty() {
        return Err(CloudError::EmptyMap.into());
    }
    let mut pose = *initial;
    let mut current = linearize(source, map, &pose, params.gate);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iterations {
        if current.matches < MIN_CORRESPONDENCES {
            return Err(MatchError::TooFewCorrespondences {
                found: current.matches,
            });
        }
        if !current.cost.is_finite() {
            return Err(MatchError::NonFiniteCost);
        }
        iterations += 1;
        let Some(chol) = current.hessian.cholesky() else {
            log::debug!("normal equations not positive definite at iteration {iterations}");
            break;
        };
        let mut step = -chol.solve(&current.gradient);

        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = pose.boxplus(&Twist::from_vector(&step));
            let lin = linearize(source, map, &candidate, params.gate);
            if lin.cost.is_finite()
                && lin.cost <= current.cost
                && lin.matches >= MIN_CORRESPONDENCES
            {
                accepted = Some((candidate, lin));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, lin)) = accepted else {
            converged = step.norm() < INCREMENT_TOLERANCE;
            break;
        };
        let decrease = current.cost - lin.cost;
        pose = candidate;
        current = lin;
        if step.norm() < INCREMENT_TOLERANCE
            || decrease <= RELATIVE_COST_TOLERANCE * (current.cost + decrease)
        {
            converged = true;
            break;
        }
    }

    if current.matches < MIN_CORRESPONDENCES {
        return Err(MatchError::TooFewCorrespondences {
            found: current.matches,
        });
    }
    if !current.cost.is_finite() {
        return Err(MatchError::NonFiniteCost);
    }
    Ok(MatchResult {
        pose,
        hessian: current.hessian,
        correspondence_rate: current.matches as f64 / source.len() as f64,
        iterations,
        converged,
        final_cost: current.cost,
    })
}

/// Gated matches of `source` at `pose` (the numerator of the correspondence rate).
pub fn count_gated_matches(
    source: &[Vector3<f64>],
    map: &MapCloud,
    pose: &Pose,
    gate: f64,
) -> usize {
    source
        .iter()
        .filter(|p| {
            map.nearest_within(&pose.transform_point(p), gate * gate)
                .is_some()
        })
        .count()
}
