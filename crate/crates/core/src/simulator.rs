//! Synthetic plane-world scenes, analytic trajectories, IMU streams and
//! raycast LiDAR sweeps with exact ground truth.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Rotation};
use crate::pipeline::StampedPose;
use crate::pointcloud::{ScanCloud, ScanPoint};
use crate::preintegration::{ImuSample, DEFAULT_GRAVITY};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario value for {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Rest, then a quintic ramp of the path speed from 0 to nominal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWarp {
    pub rest: f64,
    pub ramp: f64,
}

impl TimeWarp {
    pub const NONE: Self = Self {
        rest: 0.0,
        ramp: 0.0,
    };

    /// Path phase and its first two time derivatives.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let t = t - self.rest;
        if self.ramp <= 0.0 {
            return if t < 0.0 {
                (0.0, 0.0, 0.0)
            } else {
                (t, 1.0, 0.0)
            };
        }
        if t <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        if t >= self.ramp {
            return (0.5 * self.ramp + (t - self.ramp), 1.0, 0.0);
        }
        let u = t / self.ramp;
        let (u2, u3) = (u * u, u * u * u);
        let s = self.ramp * (2.5 * u2 * u2 - 3.0 * u2 * u3 + u3 * u3);
        let ds = 10.0 * u3 - 15.0 * u2 * u2 + 6.0 * u2 * u3;
        let dds = (30.0 * u2 - 60.0 * u3 + 30.0 * u2 * u2) / self.ramp;
        (s, ds, dds)
    }
}

/// Path shapes. Every shape keeps the body level and turns only about the vertical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Rest {
        position: [f64; 3],
        #[serde(default)]
        yaw: f64,
    },
    ConstantVelocity {
        start: [f64; 3],
        velocity: [f64; 3],
        #[serde(default)]
        yaw: f64,
    },
    /// Counter-clockwise circle, heading along the tangent.
    Circle {
        center: [f64; 3],
        radius: f64,
        /// Angular rate about the center [rad/s].
        rate: f64,
        #[serde(default)]
        start_angle: f64,
    },
    /// `(a sin θ, a/2 sin 2θ)` about `center`, heading along the tangent.
    FigureEight {
        center: [f64; 3],
        half_width: f64,
        /// dθ/dt [rad/s].
        rate: f64,
    },
    Spin {
        position: [f64; 3],
        /// Yaw rate [rad/s].
        rate: f64,
    },
}

/// Pose and its derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicState {
    pub pose: Pose,
    /// World frame [m/s].
    pub velocity: Vector3<f64>,
    /// World frame [m/s²].
    pub acceleration: Vector3<f64>,
    /// Body frame [rad/s].
    pub angular_velocity: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTrajectory {
    pub shape: Shape,
    pub warp: TimeWarp,
}

impl AnalyticTrajectory {
    pub fn new(shape: Shape, warp: TimeWarp) -> Self {
        Self { shape, warp }
    }

    pub fn eval(&self, t: f64) -> KinematicState {
        let (s, ds, dds) = self.warp.eval(t);
        // Position, its phase derivatives, yaw and yaw rate per unit phase.
        let (p, dp, ddp, yaw, dyaw) = match self.shape {
            Shape::Rest { position, yaw } => (
                Vector3::from(position),
                Vector3::zeros(),
                Vector3::zeros(),
                yaw,
                0.0,
            ),
            Shape::ConstantVelocity {
                start,
                velocity,
                yaw,
            } => {
                let v = Vector3::from(velocity);
                (Vector3::from(start) + v * s, v, Vector3::zeros(), yaw, 0.0)
            }
            Shape::Circle {
                center,
                radius,
                rate,
                start_angle,
            } => {
                let th = start_angle + rate * s;
                let (sn, cs) = th.sin_cos();
                let p = Vector3::from(center) + Vector3::new(cs, sn, 0.0) * radius;
                let dp = Vector3::new(-sn, cs, 0.0) * (radius * rate);
                let ddp = Vector3::new(-cs, -sn, 0.0) * (radius * rate * rate);
                let heading = th + if rate >= 0.0 { PI / 2.0 } else { -PI / 2.0 };
                (p, dp, ddp, heading, rate)
            }
            Shape::FigureEight {
                center,
                half_width: a,
                rate,
            } => {
                let th = rate * s;
                let (s1, c1) = th.sin_cos();
                let (s2, c2) = (2.0 * th).sin_cos();
                let p = Vector3::from(center) + Vector3::new(a * s1, 0.5 * a * s2, 0.0);
                // Derivatives with respect to θ.
                let (x1, y1) = (a * c1, a * c2);
                let (x2, y2) = (-a * s1, -2.0 * a * s2);
                let heading = y1.atan2(x1);
                let dh = (x1 * y2 - y1 * x2) / (x1 * x1 + y1 * y1);
                let dp = Vector3::new(x1, y1, 0.0) * rate;
                let ddp = Vector3::new(x2, y2, 0.0) * rate * rate;
                (p, dp, ddp, heading, dh * rate)
            }
            Shape::Spin { position, rate } => (
                Vector3::from(position),
                Vector3::zeros(),
                Vector3::zeros(),
                rate * s,
                rate,
            ),
        };
        let yaw_rate = dyaw * ds;
        KinematicState {
            pose: Pose::new(Rotation::from_rpy(0.0, 0.0, yaw), p),
            velocity: dp * ds,
            acceleration: ddp * ds * ds + dp * dds,
            angular_velocity: Vector3::new(0.0, 0.0, yaw_rate),
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.eval(t).pose
    }
}

/// A finite rectangle `origin + a·edge_u + b·edge_v`, `a, b ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub origin: Vector3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
}

impl Patch {
    pub fn new(origin: Vector3<f64>, edge_u: Vector3<f64>, edge_v: Vector3<f64>) -> Self {
        Self {
            origin,
            edge_u,
            edge_v,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    pub fn is_degenerate(&self) -> bool {
        self.edge_u.cross(&self.edge_v).norm() < 1e-9 || self.edge_u.dot(&self.edge_v).abs() > 1e-9
    }

    /// Ray parameter of the intersection with `origin + t·dir`, if within the rectangle.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.edge_u.cross(&self.edge_v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.origin - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let rel = origin + dir * t - self.origin;
        let a = rel.dot(&self.edge_u) / self.edge_u.norm_squared();
        let b = rel.dot(&self.edge_v) / self.edge_v.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlaneWorld {
    pub patches: Vec<Patch>,
}

fn v3(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

impl PlaneWorld {
    pub fn new(patches: Vec<Patch>) -> Self {
        Self { patches }
    }

    /// 40 m × 30 m walled courtyard with a central block and three free-standing panels.
    pub fn courtyard() -> Self {
        let (w, d, h) = (40.0, 30.0, 5.0);
        let mut p = vec![
            Patch::new(v3(0.0, 0.0, 0.0), v3(w, 0.0, 0.0), v3(0.0, d, 0.0)),
            Patch::new(v3(0.0, 0.0, 0.0), v3(w, 0.0, 0.0), v3(0.0, 0.0, h)),
            Patch::new(v3(w, 0.0, 0.0), v3(0.0, d, 0.0), v3(0.0, 0.0, h)),
            Patch::new(v3(w, d, 0.0), v3(-w, 0.0, 0.0), v3(0.0, 0.0, h)),
            Patch::new(v3(0.0, d, 0.0), v3(0.0, -d, 0.0), v3(0.0, 0.0, h)),
        ];
        // Central block 4 × 4 × 3 at (20, 15).
        let (x0, x1, y0, y1, bh) = (18.0, 22.0, 13.0, 17.0, 3.0);
        p.push(Patch::new(
            v3(x0, y0, 0.0),
            v3(x1 - x0, 0.0, 0.0),
            v3(0.0, 0.0, bh),
        ));
        p.push(Patch::new(
            v3(x1, y0, 0.0),
            v3(0.0, y1 - y0, 0.0),
            v3(0.0, 0.0, bh),
        ));
        p.push(Patch::new(
            v3(x1, y1, 0.0),
            v3(x0 - x1, 0.0, 0.0),
            v3(0.0, 0.0, bh),
        ));
        p.push(Patch::new(
            v3(x0, y1, 0.0),
            v3(0.0, y0 - y1, 0.0),
            v3(0.0, 0.0, bh),
        ));
        // Panels at assorted headings.
        let panel = |cx: f64, cy: f64, heading: f64, width: f64, height: f64| {
            let u = v3(heading.cos(), heading.sin(), 0.0) * width;
            Patch::new(v3(cx, cy, 0.0) - u * 0.5, u, v3(0.0, 0.0, height))
        };
        p.push(panel(6.0, 5.0, 0.6, 4.0, 2.5));
        p.push(panel(33.0, 24.5, -0.4, 5.0, 3.5));
        p.push(panel(34.0, 5.5, 1.9, 3.0, 2.0));
        Self { patches: p }
    }

    /// Nearest hit along the ray as `(range, patch index)`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        self.patches
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarModel {
    pub rings: usize,
    /// Azimuth columns per sweep.
    pub beams: usize,
    pub vertical_fov_deg: f64,
    pub sweep: f64,
    pub rate_hz: f64,
    pub range_noise_std: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// `[tx, ty, tz, qx, qy, qz, qw]` of the LiDAR in the IMU frame.
    pub imu_from_lidar: [f64; 7],
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            rings: 64,
            beams: 256,
            vertical_fov_deg: 33.2,
            sweep: 0.1,
            rate_hz: 10.0,
            range_noise_std: 0.01,
            min_range: 0.5,
            max_range: 100.0,
            imu_from_lidar: [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        }
    }
}

impl LidarModel {
    pub fn imu_from_lidar(&self) -> Pose {
        crate::config::pose_from_array("lidar.imu_from_lidar", &self.imu_from_lidar)
            .unwrap_or_default()
    }

    /// Unit ray direction in the LiDAR frame.
    pub fn direction(&self, ring: usize, column: usize) -> Vector3<f64> {
        let half = self.vertical_fov_deg.to_radians() * 0.5;
        let el = if self.rings > 1 {
            -half + 2.0 * half * ring as f64 / (self.rings - 1) as f64
        } else {
            0.0
        };
        let az = 2.0 * PI * column as f64 / self.beams as f64;
        Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }

    /// Age of a column relative to the end of the sweep.
    pub fn column_offset(&self, column: usize) -> f64 {
        if self.beams <= 1 {
            return 0.0;
        }
        self.sweep * (self.beams - 1 - column) as f64 / (self.beams - 1) as f64
    }
}

/// A raycast sweep and the world points its rays hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RaycastScan {
    pub cloud: ScanCloud,
    pub world_points: Vec<Vector3<f64>>,
}

/// Casts every ray from the LiDAR pose at the ray's own emission time.
pub fn raycast_scan(
    world: &PlaneWorld,
    trajectory: &AnalyticTrajectory,
    lidar: &LidarModel,
    scan_time: f64,
    rng: &mut ChaCha8Rng,
) -> RaycastScan {
    let noise = Normal::new(0.0, lidar.range_noise_std.max(0.0)).expect("finite std");
    let mount = lidar.imu_from_lidar();
    let mut cloud = ScanCloud::new(scan_time, Vec::with_capacity(lidar.rings * lidar.beams));
    let mut world_points = Vec::with_capacity(lidar.rings * lidar.beams);
    for column in 0..lidar.beams {
        let offset = lidar.column_offset(column);
        let sensor = trajectory.pose(scan_time - offset) * mount;
        for ring in 0..lidar.rings {
            let dir_l = lidar.direction(ring, column);
            let dir_w = sensor.rotation * dir_l;
            let Some((range, _)) = world.cast(&sensor.translation, &dir_w) else {
                continue;
            };
            if range < lidar.min_range || range > lidar.max_range {
                continue;
            }
            let noisy = range
                + if lidar.range_noise_std > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
            cloud.points.push(ScanPoint {
                position: dir_l * noisy,
                time_offset: offset,
                intensity: Some(100.0),
            });
            world_points.push(sensor.translation + dir_w * range);
        }
    }
    RaycastScan {
        cloud,
        world_points,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuModel {
    pub rate_hz: f64,
    pub gyro_noise_std: f64,
    pub accel_noise_std: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
    pub gravity: [f64; 3],
}

impl Default for ImuModel {
    fn default() -> Self {
        Self {
            rate_hz: 200.0,
            gyro_noise_std: 0.002,
            accel_noise_std: 0.02,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
            gravity: DEFAULT_GRAVITY,
        }
    }
}

/// IMU readings at `start + k / rate` for every instant up to `end`.
pub fn synth_imu(
    trajectory: &AnalyticTrajectory,
    model: &ImuModel,
    start: f64,
    end: f64,
    seed: u64,
) -> Vec<ImuSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gn = Normal::new(0.0, model.gyro_noise_std.max(0.0)).expect("finite std");
    let an = Normal::new(0.0, model.accel_noise_std.max(0.0)).expect("finite std");
    let g = Vector3::from(model.gravity);
    let bg = Vector3::from(model.gyro_bias);
    let ba = Vector3::from(model.accel_bias);
    let count = ((end - start) * model.rate_hz + 1e-9).floor() as usize;
    (0..=count)
        .map(|k| {
            let t = start + k as f64 / model.rate_hz;
            let s = trajectory.eval(t);
            let gyro_noise = Vector3::from_fn(|_, _| gn.sample(&mut rng));
            let accel_noise = Vector3::from_fn(|_, _| an.sample(&mut rng));
            let gyro = s.angular_velocity + bg + gyro_noise;
            let accel = s.pose.rotation.inverse() * (s.acceleration - g) + ba + accel_noise;
            ImuSample::new(t, gyro, accel)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTiming {
    pub seed: u64,
    /// Simulated span [s], starting at 0.
    pub duration: f64,
    #[serde(default = "default_rest")]
    pub rest: f64,
    #[serde(default = "default_ramp")]
    pub ramp: f64,
}

fn default_rest() -> f64 {
    1.0
}

fn default_ramp() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    Courtyard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub kind: WorldKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scenario: ScenarioTiming,
    pub trajectory: Shape,
    pub world: WorldSpec,
    #[serde(default)]
    pub lidar: LidarModel,
    #[serde(default)]
    pub imu: ImuModel,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let check = |key: &'static str, ok: bool, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(ScenarioError::Invalid {
                    key,
                    reason: reason.to_string(),
                })
            }
        };
        check(
            "scenario.duration",
            self.scenario.duration > 0.0,
            "must be positive",
        )?;
        check(
            "scenario.rest",
            self.scenario.rest >= 0.0,
            "must be non-negative",
        )?;
        check(
            "scenario.ramp",
            self.scenario.ramp >= 0.0,
            "must be non-negative",
        )?;
        check(
            "lidar.rate_hz",
            self.lidar.rate_hz > 0.0,
            "must be positive",
        )?;
        check(
            "lidar.sweep",
            self.lidar.sweep >= 0.0,
            "must be non-negative",
        )?;
        check("lidar.rings", self.lidar.rings > 0, "must be positive")?;
        check("lidar.beams", self.lidar.beams > 0, "must be positive")?;
        check("imu.rate_hz", self.imu.rate_hz > 0.0, "must be positive")?;
        Ok(())
    }

    pub fn trajectory(&self) -> AnalyticTrajectory {
        AnalyticTrajectory::new(
            self.trajectory,
            TimeWarp {
                rest: self.scenario.rest,
                ramp: self.scenario.ramp,
            },
        )
    }

    pub fn world(&self) -> PlaneWorld {
        match self.world.kind {
            WorldKind::Courtyard => PlaneWorld::courtyard(),
        }
    }

    /// Scan end times: every LiDAR period, starting one period in.
    pub fn scan_times(&self) -> Vec<f64> {
        let period = 1.0 / self.lidar.rate_hz;
        let n = (self.scenario.duration / period + 1e-9).floor() as usize;
        (1..=n).map(|k| k as f64 * period).collect()
    }

    pub fn generate(&self) -> SimulatedDataset {
        let traj = self.trajectory();
        let world = self.world();
        let imu = synth_imu(
            &traj,
            &self.imu,
            0.0,
            self.scenario.duration,
            self.scenario.seed,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.scenario.seed ^ 0x5ca1_ab1e);
        let times = self.scan_times();
        let scans = times
            .iter()
            .map(|&t| raycast_scan(&world, &traj, &self.lidar, t, &mut rng).cloud)
            .collect();
        let ground_truth = times
            .iter()
            .map(|&t| StampedPose {
                timestamp: t,
                pose: traj.pose(t),
            })
            .collect();
        SimulatedDataset {
            imu,
            scans,
            ground_truth,
        }
    }
}

/// IMU stream, sweeps and IMU-frame ground truth at each scan time.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<ScanCloud>,
    pub ground_truth: Vec<StampedPose>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes() -> Vec<Shape> {
        vec![
            Shape::Rest {
                position: [1.0, 2.0, 1.5],
                yaw: 0.3,
            },
            Shape::ConstantVelocity {
                start: [5.0, 5.0, 1.5],
                velocity: [1.0, 0.5, 0.0],
                yaw: 0.2,
            },
            Shape::Circle {
                center: [20.0, 15.0, 1.5],
                radius: 10.0,
                rate: 0.5,
                start_angle: 0.0,
            },
            Shape::FigureEight {
                center: [20.0, 15.0, 1.5],
                half_width: 8.0,
                rate: 0.3,
            },
            Shape::Spin {
                position: [12.0, 10.0, 1.5],
                rate: 4.2,
            },
        ]
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for shape in shapes() {
            let traj = AnalyticTrajectory::new(
                shape,
                TimeWarp {
                    rest: 1.0,
                    ramp: 2.0,
                },
            );
            for &t in &[0.5, 1.3, 2.2, 3.7, 8.9] {
                let s = traj.eval(t);
                let (a, b) = (traj.eval(t - h), traj.eval(t + h));
                let vel = (b.pose.translation - a.pose.translation) / (2.0 * h);
                let acc = (b.velocity - a.velocity) / (2.0 * h);
                let omega = (a.pose.rotation.inverse() * b.pose.rotation).log() / (2.0 * h);
                let rel = |x: Vector3<f64>, y: Vector3<f64>| (x - y).norm() / y.norm().max(1.0);
                assert!(rel(vel, s.velocity) < 1e-4, "{shape:?} t={t} v");
                assert!(rel(acc, s.acceleration) < 1e-4, "{shape:?} t={t} a");
                assert!(rel(omega, s.angular_velocity) < 1e-4, "{shape:?} t={t} w");
            }
        }
    }

    #[test]
    fn rest_imu_is_pure_gravity() {
        let traj = AnalyticTrajectory::new(
            Shape::Rest {
                position: [0.0; 3],
                yaw: 0.0,
            },
            TimeWarp::NONE,
        );
        let model = ImuModel {
            gyro_noise_std: 0.0,
            accel_noise_std: 0.0,
            ..ImuModel::default()
        };
        let imu = synth_imu(&traj, &model, 0.0, 1.0, 1);
        assert_eq!(imu.len(), 201);
        for s in imu {
            assert_eq!(s.gyro, Vector3::zeros());
            assert!((s.accel - Vector3::new(0.0, 0.0, 9.81)).norm() < 1e-12);
        }
    }

    #[test]
    fn spin_exceeds_four_rad_per_second() {
        let traj = AnalyticTrajectory::new(
            Shape::Spin {
                position: [12.0, 10.0, 1.5],
                rate: 4.2,
            },
            TimeWarp {
                rest: 1.0,
                ramp: 2.0,
            },
        );
        let imu = synth_imu(&traj, &ImuModel::default(), 0.0, 10.0, 3);
        let max = imu.iter().map(|s| s.gyro.norm()).fold(0.0, f64::max);
        assert!(max > 4.0);
    }

    #[test]
    fn seeded_streams_repeat() {
        let traj = AnalyticTrajectory::new(
            shapes()[3],
            TimeWarp {
                rest: 1.0,
                ramp: 2.0,
            },
        );
        assert_eq!(
            synth_imu(&traj, &ImuModel::default(), 0.0, 2.0, 9),
            synth_imu(&traj, &ImuModel::default(), 0.0, 2.0, 9)
        );
        assert_ne!(
            synth_imu(&traj, &ImuModel::default(), 0.0, 2.0, 9),
            synth_imu(&traj, &ImuModel::default(), 0.0, 2.0, 10)
        );
    }

    #[test]
    fn plane_ranges_are_analytic() {
        let world = PlaneWorld::new(vec![Patch::new(
            v3(5.0, -50.0, -50.0),
            v3(0.0, 100.0, 0.0),
            v3(0.0, 0.0, 100.0),
        )]);
        let traj = AnalyticTrajectory::new(
            Shape::Rest {
                position: [0.0; 3],
                yaw: 0.0,
            },
            TimeWarp::NONE,
        );
        let lidar = LidarModel {
            range_noise_std: 0.0,
            beams: 64,
            rings: 8,
            ..LidarModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan = raycast_scan(&world, &traj, &lidar, 1.0, &mut rng);
        assert!(!scan.cloud.is_empty());
        for p in &scan.cloud.points {
            let dir = p.position.normalize();
            assert!((p.position.norm() - 5.0 / dir.x).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_sweep_has_zero_offsets() {
        let traj = AnalyticTrajectory::new(shapes()[2], TimeWarp::NONE);
        let lidar = LidarModel {
            sweep: 0.0,
            beams: 32,
            ..LidarModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan = raycast_scan(&PlaneWorld::courtyard(), &traj, &lidar, 2.0, &mut rng);
        assert!(scan.cloud.points.iter().all(|p| p.time_offset == 0.0));
    }

    #[test]
    fn courtyard_is_well_formed() {
        let w = PlaneWorld::courtyard();
        assert_eq!(w.patches.len(), 12);
        assert!(w.patches.iter().all(|p| !p.is_degenerate()));
    }

    #[test]
    fn scenario_rejects_unknown_keys() {
        let text = "[scenario]\nseed = 1\nduration = 1.0\n[trajectory]\nkind = \"spin\"\nposition = [0, 0, 0]\nrate = 1.0\n[world]\nkind = \"courtyard\"\n[lidar]\nbeemz = 3\n";
        let err = Scenario::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("beemz"), "{err}");
    }
}
