//! Point-cloud containers, voxel filtering and GICP covariance estimation.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::kdtree::KdTree;

/// Smallest eigenvalue assigned by plane regularization.
pub const PLANE_EPSILON: f64 = 1e-3;
pub const DEFAULT_K_NEIGHBORS: usize = 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CloudError {
    #[error("voxel resolution must be positive, got {0}")]
    InvalidResolution(f64),
    #[error("need at least {needed} points for covariance estimation, got {got}")]
    Degenerate { needed: usize, got: usize },
    #[error("k_neighbors must be at least 4, got {0}")]
    TooFewNeighbors(usize),
    #[error("no correspondence: the map is empty")]
    EmptyMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    /// Sensor-frame position [m].
    pub position: Vector3<f64>,
    /// Time [s] between this point's capture and the cloud timestamp, which marks
    /// the end of the sweep: 0 for the newest point, up to the sweep duration.
    pub time_offset: f64,
    pub intensity: Option<f32>,
}

impl ScanPoint {
    pub fn new(position: Vector3<f64>, time_offset: f64) -> Self {
        Self {
            position,
            time_offset,
            intensity: None,
        }
    }
}

/// A LiDAR sweep. `timestamp` is the end of the sweep; point `i` was captured
/// at `timestamp - points[i].time_offset`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScanCloud {
    pub timestamp: f64,
    pub points: Vec<ScanPoint>,
}

impl ScanCloud {
    pub fn new(timestamp: f64, points: Vec<ScanPoint>) -> Self {
        Self { timestamp, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }

    /// Largest time offset, i.e. the observed sweep duration.
    pub fn sweep_duration(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.time_offset)
            .fold(0.0, f64::max)
    }
}

#[inline]
fn voxel_key(p: &Vector3<f64>, inv_res: f64) -> (i64, i64, i64) {
    (
        (p.x * inv_res).floor() as i64,
        (p.y * inv_res).floor() as i64,
        (p.z * inv_res).floor() as i64,
    )
}

#[derive(Default, Clone, Copy)]
struct VoxelAccum {
    sum: Vector3<f64>,
    time: f64,
    intensity: f64,
    intensity_count: usize,
    count: usize,
}

/// One centroid per occupied voxel, in order of first occupancy.
pub fn voxel_downsample(cloud: &ScanCloud, resolution: f64) -> Result<ScanCloud, CloudError> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(CloudError::InvalidResolution(resolution));
    }
    let inv = 1.0 / resolution;
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(cloud.len());
    let mut accum: Vec<VoxelAccum> = Vec::new();
    for p in &cloud.points {
        let slot = *slots.entry(voxel_key(&p.position, inv)).or_insert_with(|| {
            accum.push(VoxelAccum::default());
            accum.len() - 1
        });
        let a = &mut accum[slot];
        a.sum += p.position;
        a.time += p.time_offset;
        a.count += 1;
        if let Some(i) = p.intensity {
            a.intensity += f64::from(i);
            a.intensity_count += 1;
        }
    }
    let points = accum
        .iter()
        .map(|a| {
            let n = a.count as f64;
            ScanPoint {
                position: a.sum / n,
                time_offset: a.time / n,
                intensity: (a.intensity_count > 0)
                    .then(|| (a.intensity / a.intensity_count as f64) as f32),
            }
        })
        .collect();
    Ok(ScanCloud::new(cloud.timestamp, points))
}

/// Voxel centroids of a bare point list.
pub fn voxel_downsample_points(
    points: &[Vector3<f64>],
    resolution: f64,
) -> Result<Vec<Vector3<f64>>, CloudError> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(CloudError::InvalidResolution(resolution));
    }
    let inv = 1.0 / resolution;
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(points.len());
    let mut sums: Vec<(Vector3<f64>, usize)> = Vec::new();
    for p in points {
        let slot = *slots.entry(voxel_key(p, inv)).or_insert_with(|| {
            sums.push((Vector3::zeros(), 0));
            sums.len() - 1
        });
        sums[slot].0 += p;
        sums[slot].1 += 1;
    }
    Ok(sums.into_iter().map(|(s, n)| s / n as f64).collect())
}

/// The set of voxel keys occupied by `points`.
pub fn occupied_voxels(
    points: &[Vector3<f64>],
    resolution: f64,
) -> std::collections::BTreeSet<(i64, i64, i64)> {
    let inv = 1.0 / resolution;
    points.iter().map(|p| voxel_key(p, inv)).collect()
}

/// Sample covariance of each point's `k` nearest neighbours (the point itself included).
pub fn sample_covariances(tree: &KdTree, k: usize) -> Result<Vec<Matrix3<f64>>, CloudError> {
    if k < 4 {
        return Err(CloudError::TooFewNeighbors(k));
    }
    if tree.len() < k {
        return Err(CloudError::Degenerate {
            needed: k,
            got: tree.len(),
        });
    }
    let pts = tree.points();
    Ok(pts
        .iter()
        .map(|p| {
            let nn = tree.k_nearest(p, k);
            let mean = nn
                .iter()
                .fold(Vector3::zeros(), |acc, &(i, _)| acc + pts[i])
                / k as f64;
            let mut cov = Matrix3::zeros();
            for &(i, _) in &nn {
                let d = pts[i] - mean;
                cov += d * d.transpose();
            }
            cov / (k - 1) as f64
        })
        .collect())
}

/// Replaces the eigenvalues by `(1, 1, ε)`, with `ε` on the smallest-variance axis.
pub fn regularize_plane(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let min_axis = eig.eigenvalues.imin();
    let mut values = Vector3::repeat(1.0);
    values[min_axis] = PLANE_EPSILON;
    let v = eig.eigenvectors;
    let c = v * Matrix3::from_diagonal(&values) * v.transpose();
    (c + c.transpose()) * 0.5
}

/// Plane-regularized GICP covariances for every point.
pub fn estimate_point_covariances(
    points: &[Vector3<f64>],
    k_neighbors: usize,
) -> Result<Vec<Matrix3<f64>>, CloudError> {
    let tree = KdTree::new(points.to_vec());
    covariances_from_tree(&tree, k_neighbors)
}

fn covariances_from_tree(tree: &KdTree, k: usize) -> Result<Vec<Matrix3<f64>>, CloudError> {
    Ok(sample_covariances(tree, k)?
        .iter()
        .map(regularize_plane)
        .collect())
}

/// World-frame registration target: points, their kd-tree and covariances.
/// Immutable once built.
#[derive(Debug, Clone)]
pub struct MapCloud {
    tree: KdTree,
    covariances: Vec<Matrix3<f64>>,
}

impl MapCloud {
    pub fn new(points: Vec<Vector3<f64>>, k_neighbors: usize) -> Result<Self, CloudError> {
        let tree = KdTree::new(points);
        let covariances = covariances_from_tree(&tree, k_neighbors)?;
        Ok(Self { tree, covariances })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        self.tree.points()
    }

    pub fn covariances(&self) -> &[Matrix3<f64>] {
        &self.covariances
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Exact nearest neighbour as `(index, distance)`.
    pub fn nearest_neighbor(&self, query: &Vector3<f64>) -> Result<(usize, f64), CloudError> {
        self.tree
            .nearest(query)
            .map(|(i, d2)| (i, d2.sqrt()))
            .ok_or(CloudError::EmptyMap)
    }

    pub(crate) fn nearest_within(
        &self,
        query: &Vector3<f64>,
        max_dist_sq: f64,
    ) -> Option<(usize, f64)> {
        self.tree.nearest_within(query, max_dist_sq)
    }
}
