//! Runtime configuration, loaded from TOML with four sections.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::ekf::MeasurementNoise;
use crate::geometry::{Pose, Rotation};
use crate::preintegration::{NoiseParams, DEFAULT_GRAVITY, DEFAULT_MAX_GAP};
use crate::scan_matching::{Extrinsics, GicpParams};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Process noise scale q.
    pub q: f64,
    /// σp², scale of the inverse registration Hessian.
    pub sigma_p_sq: f64,
    /// σv²
    pub sigma_v_sq: f64,
    /// σω²
    pub sigma_omega_sq: f64,
    /// σa²
    pub sigma_a_sq: f64,
    /// Σ0 = initial_covariance · I
    pub initial_covariance: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let m = MeasurementNoise::default();
        Self {
            q: 1.0,
            sigma_p_sq: m.sigma_p_sq,
            sigma_v_sq: m.sigma_v_sq,
            sigma_omega_sq: m.sigma_omega_sq,
            sigma_a_sq: m.sigma_a_sq,
            initial_covariance: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    /// r [m]
    pub voxel_resolution: f64,
    /// ε [m]
    pub gate: f64,
    pub max_iterations: usize,
    pub k_neighbors: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        let g = GicpParams::default();
        Self {
            voxel_resolution: 0.1,
            gate: g.gate,
            max_iterations: g.max_iterations,
            k_neighbors: g.k_neighbors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    /// γ_th
    pub gamma_threshold: f64,
    /// N
    pub keyframe_count: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            gamma_threshold: 0.8,
            keyframe_count: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub imu_buffer_capacity: usize,
    /// Longest tolerated gap between IMU samples [s].
    pub max_imu_gap: f64,
    /// Scans with fewer points after filtering are rejected.
    pub min_scan_points: usize,
    /// Accelerometer averaging window for the initial roll and pitch [s].
    pub gravity_alignment_window: f64,
    pub gravity: [f64; 3],
    /// `[tx, ty, tz, qx, qy, qz, qw]` of the LiDAR frame in the IMU frame.
    pub imu_from_lidar: [f64; 7],
    /// `[tx, ty, tz, qx, qy, qz, qw]` of the reported output frame in the IMU frame.
    pub imu_from_output: [f64; 7],
}

const IDENTITY_POSE: [f64; 7] = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            imu_buffer_capacity: 4000,
            max_imu_gap: DEFAULT_MAX_GAP,
            min_scan_points: 100,
            gravity_alignment_window: 1.0,
            gravity: DEFAULT_GRAVITY,
            imu_from_lidar: IDENTITY_POSE,
            imu_from_output: IDENTITY_POSE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub noise: NoiseConfig,
    pub matcher: MatcherConfig,
    pub mapping: MappingConfig,
    pub pipeline: PipelineConfig,
}

fn positive(key: &'static str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            key,
            reason: format!("{v} is not a positive finite number"),
        })
    }
}

pub fn pose_from_array(key: &'static str, a: &[f64; 7]) -> Result<Pose, ConfigError> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(ConfigError::Invalid {
            key,
            reason: "non-finite component".into(),
        });
    }
    let q = Quaternion::new(a[6], a[3], a[4], a[5]);
    if q.norm() < 1e-9 {
        return Err(ConfigError::Invalid {
            key,
            reason: "zero quaternion".into(),
        });
    }
    Ok(Pose::new(
        Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q)),
        Vector3::new(a[0], a[1], a[2]),
    ))
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = &self.noise;
        positive("noise.q", n.q)?;
        positive("noise.sigma_p_sq", n.sigma_p_sq)?;
        positive("noise.sigma_v_sq", n.sigma_v_sq)?;
        positive("noise.sigma_omega_sq", n.sigma_omega_sq)?;
        positive("noise.sigma_a_sq", n.sigma_a_sq)?;
        positive("noise.initial_covariance", n.initial_covariance)?;
        positive("matcher.voxel_resolution", self.matcher.voxel_resolution)?;
        positive("matcher.gate", self.matcher.gate)?;
        if self.matcher.max_iterations == 0 {
            return Err(ConfigError::Invalid {
                key: "matcher.max_iterations",
                reason: "must be at least 1".into(),
            });
        }
        if self.matcher.k_neighbors < 4 {
            return Err(ConfigError::Invalid {
                key: "matcher.k_neighbors",
                reason: "must be at least 4".into(),
            });
        }
        let g = self.mapping.gamma_threshold;
        if !(0.0..=1.0).contains(&g) {
            return Err(ConfigError::Invalid {
                key: "mapping.gamma_threshold",
                reason: format!("{g} is outside [0, 1]"),
            });
        }
        if self.mapping.keyframe_count == 0 {
            return Err(ConfigError::Invalid {
                key: "mapping.keyframe_count",
                reason: "must be at least 1".into(),
            });
        }
        if self.pipeline.imu_buffer_capacity == 0 {
            return Err(ConfigError::Invalid {
                key: "pipeline.imu_buffer_capacity",
                reason: "must be at least 1".into(),
            });
        }
        positive("pipeline.max_imu_gap", self.pipeline.max_imu_gap)?;
        positive(
            "pipeline.gravity_alignment_window",
            self.pipeline.gravity_alignment_window,
        )?;
        if self.pipeline.gravity.iter().any(|x| !x.is_finite()) {
            return Err(ConfigError::Invalid {
                key: "pipeline.gravity",
                reason: "non-finite component".into(),
            });
        }
        pose_from_array("pipeline.imu_from_lidar", &self.pipeline.imu_from_lidar)?;
        pose_from_array("pipeline.imu_from_output", &self.pipeline.imu_from_output)?;
        Ok(())
    }

    pub fn noise_params(&self) -> NoiseParams {
        NoiseParams {
            q: self.noise.q,
            gravity: self.gravity(),
        }
    }

    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.pipeline.gravity)
    }

    pub fn measurement_noise(&self) -> MeasurementNoise {
        MeasurementNoise {
            sigma_p_sq: self.noise.sigma_p_sq,
            sigma_v_sq: self.noise.sigma_v_sq,
            sigma_omega_sq: self.noise.sigma_omega_sq,
            sigma_a_sq: self.noise.sigma_a_sq,
        }
    }

    pub fn gicp_params(&self) -> GicpParams {
        GicpParams {
            gate: self.matcher.gate,
            max_iterations: self.matcher.max_iterations,
            k_neighbors: self.matcher.k_neighbors,
        }
    }

    pub fn extrinsics(&self) -> Extrinsics {
        Extrinsics::new(
            pose_from_array("pipeline.imu_from_lidar", &self.pipeline.imu_from_lidar)
                .unwrap_or_default(),
        )
    }

    pub fn imu_from_output(&self) -> Pose {
        pose_from_array("pipeline.imu_from_output", &self.pipeline.imu_from_output)
            .unwrap_or_default()
    }

    /// Commented TOML for the fully resolved configuration.
    pub fn to_commented_toml(&self) -> String {
        let n = &self.noise;
        let m = &self.matcher;
        let k = &self.mapping;
        let p = &self.pipeline;
        let mut s = String::new();
        let _ = writeln!(s, "[noise]");
        let _ = writeln!(s, "# q: process noise scale");
        let _ = writeln!(s, "q = {:?}", n.q);
        let _ = writeln!(s, "# sigma_p^2: scale of the inverse registration Hessian");
        let _ = writeln!(s, "sigma_p_sq = {:?}", n.sigma_p_sq);
        let _ = writeln!(
            s,
            "# sigma_v^2, sigma_omega^2, sigma_a^2: velocity and bias measurement variances"
        );
        let _ = writeln!(s, "sigma_v_sq = {:?}", n.sigma_v_sq);
        let _ = writeln!(s, "sigma_omega_sq = {:?}", n.sigma_omega_sq);
        let _ = writeln!(s, "sigma_a_sq = {:?}", n.sigma_a_sq);
        let _ = writeln!(s, "# Sigma_0 = initial_covariance * I");
        let _ = writeln!(s, "initial_covariance = {:?}", n.initial_covariance);
        let _ = writeln!(s);
        let _ = writeln!(s, "[matcher]");
        let _ = writeln!(s, "# r: voxel filter resolution [m]");
        let _ = writeln!(s, "voxel_resolution = {:?}", m.voxel_resolution);
        let _ = writeln!(s, "# epsilon: correspondence gate [m]");
        let _ = writeln!(s, "gate = {:?}", m.gate);
        let _ = writeln!(s, "max_iterations = {}", m.max_iterations);
        let _ = writeln!(s, "k_neighbors = {}", m.k_neighbors);
        let _ = writeln!(s);
        let _ = writeln!(s, "[mapping]");
        let _ = writeln!(
            s,
            "# gamma_th: keyframe insertion threshold on the correspondence rate"
        );
        let _ = writeln!(s, "gamma_threshold = {:?}", k.gamma_threshold);
        let _ = writeln!(s, "# N: keyframes used for the local map");
        let _ = writeln!(s, "keyframe_count = {}", k.keyframe_count);
        let _ = writeln!(s);
        let _ = writeln!(s, "[pipeline]");
        let _ = writeln!(s, "imu_buffer_capacity = {}", p.imu_buffer_capacity);
        let _ = writeln!(s, "max_imu_gap = {:?}", p.max_imu_gap);
        let _ = writeln!(s, "min_scan_points = {}", p.min_scan_points);
        let _ = writeln!(
            s,
            "gravity_alignment_window = {:?}",
            p.gravity_alignment_window
        );
        let _ = writeln!(s, "gravity = {:?}", p.gravity);
        let _ = writeln!(s, "# [tx, ty, tz, qx, qy, qz, qw]");
        let _ = writeln!(s, "imu_from_lidar = {:?}", p.imu_from_lidar);
        let _ = writeln!(s, "imu_from_output = {:?}", p.imu_from_output);
        s
    }
}
