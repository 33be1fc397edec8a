//! Keyframe bookkeeping and local-map reconstruction.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::kdtree::KdTree;
use crate::pointcloud::{voxel_downsample_points, CloudError, MapCloud, ScanCloud};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MappingError {
    #[error("keyframe set is empty")]
    EmptySet,
    #[error("keyframe cloud is empty")]
    EmptyCloud,
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: u64,
    pub pose: Pose,
    /// Deskewed points in the body frame of `pose`.
    pub cloud: ScanCloud,
}

#[derive(Debug, Clone, Default)]
pub struct KeyframeSet {
    keyframes: Vec<Keyframe>,
    index: Option<KdTree>,
}

impl KeyframeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    /// Appends a keyframe and returns its id.
    pub fn insert(&mut self, pose: Pose, cloud: ScanCloud) -> Result<u64, MappingError> {
        if cloud.is_empty() {
            return Err(MappingError::EmptyCloud);
        }
        let id = self.keyframes.last().map_or(0, |k| k.id + 1);
        self.keyframes.push(Keyframe { id, pose, cloud });
        let centers = self.keyframes.iter().map(|k| k.pose.translation).collect();
        self.index = Some(KdTree::new(centers));
        Ok(id)
    }

    /// Positions in `keyframes()` of the `n` keyframes closest to `center`,
    /// nearest first, ties by lower id.
    pub fn nearest(&self, center: &Vector3<f64>, n: usize) -> Vec<usize> {
        match &self.index {
            Some(tree) => tree
                .k_nearest(center, n)
                .into_iter()
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }
}

/// True when the correspondence rate drops strictly below the threshold, or
/// when there are no keyframes yet.
pub fn should_insert_keyframe(gamma: f64, gamma_threshold: f64, set: &KeyframeSet) -> bool {
    set.is_empty() || gamma < gamma_threshold
}

/// World-frame points of the `n` keyframes nearest to `center`, concatenated
/// in id order and voxel-filtered.
pub fn local_map_points(
    set: &KeyframeSet,
    center: &Vector3<f64>,
    n: usize,
    voxel_resolution: f64,
) -> Result<Vec<Vector3<f64>>, MappingError> {
    if set.is_empty() {
        return Err(MappingError::EmptySet);
    }
    let mut selected = set.nearest(center, n);
    selected.sort_unstable();
    let mut points =
        Vec::with_capacity(selected.iter().map(|&i| set.keyframes[i].cloud.len()).sum());
    for i in selected {
        let kf = &set.keyframes[i];
        points.extend(
            kf.cloud
                .points
                .iter()
                .map(|p| kf.pose.transform_point(&p.position)),
        );
    }
    Ok(voxel_downsample_points(&points, voxel_resolution)?)
}

pub fn build_local_map(
    set: &KeyframeSet,
    center: &Vector3<f64>,
    n: usize,
    voxel_resolution: f64,
    k_neighbors: usize,
) -> Result<MapCloud, MappingError> {
    let points = local_map_points(set, center, n, voxel_resolution)?;
    Ok(MapCloud::new(points, k_neighbors)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::pointcloud::{voxel_downsample, ScanPoint};

    fn patch(offset: f64) -> ScanCloud {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(ScanPoint::new(
                    Vector3::new(i as f64 * 0.2 + offset, j as f64 * 0.2, 0.0),
                    0.0,
                ));
            }
        }
        ScanCloud::new(0.0, pts)
    }

    #[test]
    fn insertion_rule() {
        let mut set = KeyframeSet::new();
        assert!(should_insert_keyframe(0.99, 0.8, &set));
        set.insert(Pose::identity(), patch(0.0)).unwrap();
        assert!(!should_insert_keyframe(0.9, 0.8, &set));
        assert!(!should_insert_keyframe(0.5, 0.5, &set));
        assert!(should_insert_keyframe(0.49, 0.5, &set));
    }

    #[test]
    fn ids_increase() {
        let mut set = KeyframeSet::new();
        for i in 0..5 {
            assert_eq!(set.insert(Pose::identity(), patch(0.0)).unwrap(), i);
        }
        assert_eq!(
            set.insert(Pose::identity(), ScanCloud::default()),
            Err(MappingError::EmptyCloud)
        );
    }

    #[test]
    fn single_keyframe_map_is_its_cloud() {
        let mut set = KeyframeSet::new();
        let cloud = patch(0.0);
        set.insert(Pose::identity(), cloud.clone()).unwrap();
        let map = build_local_map(&set, &Vector3::zeros(), 20, 0.1, 20).unwrap();
        let expected = voxel_downsample(&cloud, 0.1).unwrap().positions();
        assert_eq!(map.points(), &expected[..]);
    }

    #[test]
    fn keyframes_on_a_line() {
        let mut set = KeyframeSet::new();
        for i in 0..30 {
            set.insert(
                Pose::from_translation(Vector3::new(i as f64 * 1.5, 0.0, 0.0)),
                patch(0.0),
            )
            .unwrap();
        }
        let center = Vector3::new(-1.0, 0.3, 0.0);
        let mut brute: Vec<(f64, u64)> = set
            .keyframes()
            .iter()
            .map(|k| ((k.pose.translation - center).norm(), k.id))
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<u64> = brute[..5].iter().map(|x| x.1).collect();
        let got: Vec<u64> = set
            .nearest(&center, 5)
            .iter()
            .map(|&i| set.keyframes()[i].id)
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn empty_set_has_no_map() {
        let set = KeyframeSet::new();
        assert_eq!(
            build_local_map(&set, &Vector3::zeros(), 5, 0.1, 20).unwrap_err(),
            MappingError::EmptySet
        );
    }

    #[test]
    fn map_is_world_frame_and_bounded() {
        let mut set = KeyframeSet::new();
        let pose = Pose::new(
            Rotation::from_rpy(0.0, 0.0, 1.0),
            Vector3::new(5.0, 2.0, 0.0),
        );
        set.insert(pose, patch(0.0)).unwrap();
        set.insert(Pose::identity(), patch(0.05)).unwrap();
        let pts = local_map_points(&set, &Vector3::zeros(), 2, 0.1).unwrap();
        assert!(pts.len() <= 200);
        let far = local_map_points(&set, &Vector3::new(5.0, 2.0, 0.0), 1, 0.1).unwrap();
        assert!(far
            .iter()
            .all(|p| (p - Vector3::new(5.0, 2.0, 0.0)).norm() < 3.0));
        assert_eq!(
            pts,
            local_map_points(&set, &Vector3::zeros(), 2, 0.1).unwrap()
        );
    }
}
