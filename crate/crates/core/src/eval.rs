//! Trajectory association, rigid alignment and absolute pose error.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Rotation};
use crate::pipeline::StampedPose;

pub const DEFAULT_MAX_DT: f64 = 0.02;
const DEGENERATE_SPREAD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("trajectory is empty")]
    Empty,
    #[error("no poses could be associated within {max_dt} s")]
    NoPairs { max_dt: f64 },
    #[error("alignment needs at least 3 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("positions are collinear or coincident")]
    Degenerate,
}

/// Greedy nearest-timestamp association. Candidate pairs within `max_dt`
/// are taken in order of increasing |dt| (ties by index), using every pose
/// of either trajectory at most once. Returned pairs are `(est, ref)`
/// sorted by estimate index.
pub fn associate(
    est: &[StampedPose],
    reference: &[StampedPose],
    max_dt: f64,
) -> Result<Vec<(usize, usize)>, EvalError> {
    if est.is_empty() || reference.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut order: Vec<usize> = (0..reference.len()).collect();
    order.sort_by(|&a, &b| {
        reference[a]
            .timestamp
            .total_cmp(&reference[b].timestamp)
            .then(a.cmp(&b))
    });
    let times: Vec<f64> = order.iter().map(|&j| reference[j].timestamp).collect();

    let mut candidates = Vec::new();
    for (i, e) in est.iter().enumerate() {
        let lo = times.partition_point(|&t| t < e.timestamp - max_dt);
        for k in lo..times.len() {
            let dt = (times[k] - e.timestamp).abs();
            if times[k] > e.timestamp + max_dt {
                break;
            }
            if dt <= max_dt {
                candidates.push((dt, i, order[k]));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut est_used = vec![false; est.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !est_used[i] && !ref_used[j] {
            est_used[i] = true;
            ref_used[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoPairs { max_dt });
    }
    pairs.sort_unstable();
    Ok(pairs)
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Rigid transform `G` minimizing Σ‖ref − G·est‖² (no scale).
pub fn umeyama_align(est: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<Pose, EvalError> {
    assert_eq!(
        est.len(),
        reference.len(),
        "paired inputs must have equal length"
    );
    let n = est.len();
    if n < 3 {
        return Err(EvalError::TooFewPairs(n));
    }
    let mu_e = centroid(est);
    let mu_r = centroid(reference);
    let mut cross = Matrix3::zeros();
    let mut spread_e = Matrix3::zeros();
    let mut spread_r = Matrix3::zeros();
    for (e, r) in est.iter().zip(reference) {
        let de = e - mu_e;
        let dr = r - mu_r;
        cross += dr * de.transpose();
        spread_e += de * de.transpose();
        spread_r += dr * dr.transpose();
    }
    cross /= n as f64;
    for spread in [spread_e / n as f64, spread_r / n as f64] {
        let mut ev = spread.symmetric_eigenvalues();
        ev.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
        if !(ev[1] > DEGENERATE_SPREAD * ev[0].max(1.0)) {
            return Err(EvalError::Degenerate);
        }
    }
    let svd = cross.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = Rotation::from_matrix_unchecked(u * s * v_t).renormalized();
    let translation = mu_r - rotation.matrix() * mu_e;
    Ok(Pose::new(rotation, translation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub timestamp: f64,
    pub translation: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApeReport {
    pub pairs: usize,
    pub estimate_poses: usize,
    pub reference_poses: usize,
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub rotation_rmse_deg: f64,
    /// Maps estimate coordinates onto the reference.
    pub alignment: Pose,
    pub errors: Vec<PoseError>,
}

/// Associates, aligns, and measures residuals after alignment.
pub fn evaluate(
    est: &[StampedPose],
    reference: &[StampedPose],
    max_dt: f64,
) -> Result<ApeReport, EvalError> {
    let pairs = associate(est, reference, max_dt)?;
    let pe: Vec<_> = pairs
        .iter()
        .map(|&(i, _)| est[i].pose.translation)
        .collect();
    let pr: Vec<_> = pairs
        .iter()
        .map(|&(_, j)| reference[j].pose.translation)
        .collect();
    let alignment = umeyama_align(&pe, &pr)?;
    let errors: Vec<PoseError> = pairs
        .iter()
        .map(|&(i, j)| {
            let aligned = alignment * est[i].pose;
            let r = &reference[j].pose;
            PoseError {
                timestamp: est[i].timestamp,
                translation: (aligned.translation - r.translation).norm(),
                rotation_deg: (r.rotation.inverse() * aligned.rotation)
                    .angle()
                    .to_degrees(),
            }
        })
        .collect();
    let n = errors.len() as f64;
    let rms =
        |f: fn(&PoseError) -> f64| (errors.iter().map(|e| f(e).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted: Vec<f64> = errors.iter().map(|e| e.translation).collect();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(ApeReport {
        pairs: errors.len(),
        estimate_poses: est.len(),
        reference_poses: reference.len(),
        rmse: rms(|e| e.translation),
        mean: sorted.iter().sum::<f64>() / n,
        median,
        max: *sorted.last().expect("non-empty"),
        rotation_rmse_deg: rms(|e| e.rotation_deg),
        alignment,
        errors,
    })
}

pub fn ape_rmse(est: &[StampedPose], reference: &[StampedPose]) -> Result<f64, EvalError> {
    Ok(evaluate(est, reference, DEFAULT_MAX_DT)?.rmse)
}

impl ApeReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "APE (translation, after SE(3) alignment)");
        let _ = writeln!(
            s,
            "  pairs   {} of {} estimate / {} reference poses",
            self.pairs, self.estimate_poses, self.reference_poses
        );
        let _ = writeln!(s, "  rmse    {:.6} m", self.rmse);
        let _ = writeln!(s, "  mean    {:.6} m", self.mean);
        let _ = writeln!(s, "  median  {:.6} m", self.median);
        let _ = writeln!(s, "  max     {:.6} m", self.max);
        let _ = writeln!(s, "rotation rmse {:.6} deg", self.rotation_rmse_deg);
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("pairs", self.pairs.to_string()),
            ("ape_rmse_m", format!("{:.9}", self.rmse)),
            ("ape_mean_m", format!("{:.9}", self.mean)),
            ("ape_median_m", format!("{:.9}", self.median)),
            ("ape_max_m", format!("{:.9}", self.max)),
            ("rot_rmse_deg", format!("{:.9}", self.rotation_rmse_deg)),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn errors_csv(&self) -> String {
        let mut s = String::from("timestamp,translation_error_m,rotation_error_deg\n");
        for e in &self.errors {
            let _ = writeln!(
                s,
                "{:.6},{:.9},{:.9}",
                e.timestamp, e.translation, e.rotation_deg
            );
        }
        s
    }
}
