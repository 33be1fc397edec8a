//! Scan-by-scan odometry: prediction, deskew, registration, update and map maintenance.
//!
//! A [`Pipeline`] owns the filter state, the keyframes and the current local
//! map. IMU samples are buffered through [`Pipeline::push_imu`] and consumed
//! by [`Pipeline::process_scan`] over the half-open interval between the
//! previous scan timestamp and the current one.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::ekf::{build_measurement, build_measurement_noise, kalman_update, PreviousMatch};
use crate::geometry::{Pose, Rotation};
use crate::mapping::{build_local_map, should_insert_keyframe, KeyframeSet, MappingError};
use crate::pointcloud::{
    voxel_downsample, voxel_downsample_points, CloudError, MapCloud, ScanCloud,
};
use crate::preintegration::{
    preintegrate_batch, ImuSample, NavState, Preintegration, PreintegrationTrajectory,
    StateCovariance, StepCarry, TrajectoryEntry, Vector15,
};
use crate::scan_matching::{deskew, gicp_align_prepared, GicpSource};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("scan at {current} does not follow the previous scan at {previous}")]
    OutOfOrderScan { previous: f64, current: f64 },
    #[error("scan at {timestamp} has {points} points after filtering, need {required}")]
    DegenerateScan {
        timestamp: f64,
        points: usize,
        required: usize,
    },
    #[error("scan contains non-finite points or time offsets")]
    InvalidScan,
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// Bounded FIFO of IMU samples. Overflow drops the oldest sample.
#[derive(Debug, Clone)]
pub struct ImuBuffer {
    samples: VecDeque<ImuSample>,
    capacity: usize,
    last_timestamp: Option<f64>,
    overflow_drops: u64,
    out_of_order_drops: u64,
}

impl ImuBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            samples: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
            last_timestamp: None,
            overflow_drops: 0,
            out_of_order_drops: 0,
        }
    }

    /// Returns false if the sample was older than the newest accepted one.
    pub fn push(&mut self, sample: ImuSample) -> bool {
        if self.last_timestamp.is_some_and(|t| sample.timestamp < t)
            || !sample.timestamp.is_finite()
        {
            self.out_of_order_drops += 1;
            log::debug!("dropping out-of-order IMU sample at {}", sample.timestamp);
            return false;
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
            self.overflow_drops += 1;
            if self.overflow_drops.is_power_of_two() {
                log::warn!(
                    "IMU buffer full; {} samples dropped so far",
                    self.overflow_drops
                );
            }
        }
        self.last_timestamp = Some(sample.timestamp);
        self.samples.push_back(sample);
        true
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn overflow_drops(&self) -> u64 {
        self.overflow_drops
    }

    pub fn out_of_order_drops(&self) -> u64 {
        self.out_of_order_drops
    }

    /// Samples with timestamps in `[start, end]`, left in the buffer.
    pub fn window(&self, start: f64, end: f64) -> Vec<ImuSample> {
        self.samples
            .iter()
            .filter(|s| s.timestamp >= start && s.timestamp <= end)
            .copied()
            .collect()
    }

    /// Removes everything up to `end` and returns the samples after `start`,
    /// with repeated timestamps collapsed to their first sample.
    pub fn drain_interval(&mut self, start: f64, end: f64) -> Vec<ImuSample> {
        let mut out: Vec<ImuSample> = Vec::new();
        while let Some(front) = self.samples.front() {
            if front.timestamp > end {
                break;
            }
            let s = self.samples.pop_front().expect("front exists");
            if s.timestamp > start && out.last().is_none_or(|l| s.timestamp > l.timestamp) {
                out.push(s);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStatus {
    /// First scan: inserted as the first keyframe, no update.
    Bootstrap,
    Updated,
    /// Registration failed; the state is the prediction.
    RegistrationFailed,
    /// Too few points after filtering; the state is the prediction.
    Degenerate,
    /// The Kalman update was numerically unusable; the state is the prediction.
    UpdateFailed,
}

impl ScanStatus {
    pub fn is_failure(self) -> bool {
        matches!(
            self,
            Self::RegistrationFailed | Self::Degenerate | Self::UpdateFailed
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bootstrap => "bootstrap",
            Self::Updated => "updated",
            Self::RegistrationFailed => "registration_failed",
            Self::Degenerate => "degenerate",
            Self::UpdateFailed => "update_failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub correspondence_rate: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_cost: f64,
}

/// One line of odometry output per processed scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryRecord {
    pub timestamp: f64,
    pub state: NavState,
    pub covariance_diagonal: Vector15,
    pub matching: Option<MatchSummary>,
    pub keyframe_inserted: bool,
    pub status: ScanStatus,
    pub imu_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSnapshot {
    pub state: Option<NavState>,
    pub covariance_diagonal: Option<Vector15>,
    pub scans_processed: usize,
    pub failed_scans: usize,
    pub keyframes: usize,
    pub map_points: usize,
    pub imu_buffered: usize,
    pub imu_overflow_drops: u64,
    pub imu_out_of_order_drops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub records: Vec<OdometryRecord>,
    /// Poses of the output frame, one per record.
    pub trajectory: Vec<StampedPose>,
    /// Union of all keyframe clouds in the world frame, voxel-filtered.
    pub map: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone)]
struct Filter {
    state: NavState,
    covariance: StateCovariance,
    carry: Option<StepCarry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Imu(ImuSample),
    Scan(ScanCloud),
}

impl Event {
    pub fn timestamp(&self) -> f64 {
        match self {
            Event::Imu(s) => s.timestamp,
            Event::Scan(c) => c.timestamp,
        }
    }
}

/// Interleaves the two streams by timestamp; IMU samples sort before a scan
/// with the same timestamp.
pub fn merge_events(imu: Vec<ImuSample>, scans: Vec<ScanCloud>) -> Vec<Event> {
    let mut events: Vec<Event> = imu
        .into_iter()
        .map(Event::Imu)
        .chain(scans.into_iter().map(Event::Scan))
        .collect();
    events.sort_by(|a, b| {
        a.timestamp()
            .total_cmp(&b.timestamp())
            .then_with(|| matches!(a, Event::Scan(_)).cmp(&matches!(b, Event::Scan(_))))
    });
    events
}

/// Rotation with no heading that maps the mean specific force onto the up direction.
pub fn gravity_alignment(samples: &[ImuSample], gravity: &Vector3<f64>) -> Rotation {
    if samples.is_empty() {
        return Rotation::identity();
    }
    let mean = samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / samples.len() as f64;
    match Rotation3::rotation_between(&mean, &(-gravity)) {
        Some(r) if mean.norm() > 1e-6 => Rotation::from_matrix_unchecked(*r.matrix()),
        _ => Rotation::identity(),
    }
}

#[derive(Debug)]
pub struct Pipeline {
    config: Config,
    buffer: ImuBuffer,
    filter: Option<Filter>,
    keyframes: KeyframeSet,
    map: Option<Arc<MapCloud>>,
    previous: Option<PreviousMatch>,
    last_scan_time: Option<f64>,
    records: Vec<OdometryRecord>,
}

impl Pipeline {
    pub fn new(config: Config) -> Self {
        Self {
            buffer: ImuBuffer::new(config.pipeline.imu_buffer_capacity),
            config,
            filter: None,
            keyframes: KeyframeSet::new(),
            map: None,
            previous: None,
            last_scan_time: None,
            records: Vec::new(),
        }
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn push_imu(&mut self, sample: ImuSample) -> bool {
        self.buffer.push(sample)
    }

    pub fn imu_buffer(&self) -> &ImuBuffer {
        &self.buffer
    }

    pub fn keyframes(&self) -> &KeyframeSet {
        &self.keyframes
    }

    pub fn records(&self) -> &[OdometryRecord] {
        &self.records
    }

    /// Current local map.
    pub fn map(&self) -> Option<Arc<MapCloud>> {
        self.map.clone()
    }

    pub fn handle(&mut self, event: Event) -> Result<Option<OdometryRecord>, PipelineError> {
        match event {
            Event::Imu(s) => {
                self.push_imu(s);
                Ok(None)
            }
            Event::Scan(c) => self.process_scan(&c).map(Some),
        }
    }

    pub fn process_scan(&mut self, cloud: &ScanCloud) -> Result<OdometryRecord, PipelineError> {
        let valid = cloud.timestamp.is_finite()
            && cloud.points.iter().all(|p| {
                p.position.iter().all(|x| x.is_finite())
                    && p.time_offset.is_finite()
                    && p.time_offset >= 0.0
            });
        if !valid {
            return Err(PipelineError::InvalidScan);
        }
        if let Some(previous) = self.last_scan_time {
            if cloud.timestamp <= previous {
                return Err(PipelineError::OutOfOrderScan {
                    previous,
                    current: cloud.timestamp,
                });
            }
        }
        let record = match self.filter {
            None => self.bootstrap(cloud)?,
            Some(_) => self.track(cloud)?,
        };
        self.records.push(record.clone());
        Ok(record)
    }

    fn bootstrap(&mut self, cloud: &ScanCloud) -> Result<OdometryRecord, PipelineError> {
        let t0 = cloud.timestamp;
        let gravity = self.config.gravity();
        let window = self
            .buffer
            .window(t0 - self.config.pipeline.gravity_alignment_window, t0);
        if window.is_empty() {
            log::warn!("no IMU samples before the first scan; assuming a level start");
        }
        let initial = Pose::new(gravity_alignment(&window, &gravity), Vector3::zeros());

        // Motion inside the first sweep, integrated from rest.
        let sweep = cloud.sweep_duration();
        let start = NavState::at_rest(initial, t0 - sweep);
        let batch: Vec<_> = window
            .into_iter()
            .filter(|s| s.timestamp > t0 - sweep)
            .collect();
        let trajectory = match self.predict(&start, &StateCovariance::zeros(), None, &batch, t0) {
            Ok(p) => p.trajectory,
            Err(_) => constant_trajectory(&start, t0),
        };
        let predicted = trajectory.last_state().map_or(initial, |s| s.pose);
        let deskewed = deskew(cloud, &trajectory, &predicted, &self.config.extrinsics()).cloud;
        let filtered = voxel_downsample(&deskewed, self.config.matcher.voxel_resolution)?;
        if filtered.len()
            < self
                .config
                .pipeline
                .min_scan_points
                .max(self.config.matcher.k_neighbors)
        {
            return Err(PipelineError::DegenerateScan {
                timestamp: t0,
                points: filtered.len(),
                required: self.config.pipeline.min_scan_points,
            });
        }

        let imu_samples = self.buffer.drain_interval(f64::NEG_INFINITY, t0).len();
        self.keyframes.insert(initial, filtered)?;
        self.rebuild_map(&initial.translation)?;
        let state = NavState::at_rest(initial, t0);
        let covariance = StateCovariance::scaled_identity(self.config.noise.initial_covariance);
        let diag = covariance.diagonal();
        self.filter = Some(Filter {
            state,
            covariance,
            carry: None,
        });
        self.previous = Some(PreviousMatch {
            pose: initial,
            velocity: None,
        });
        self.last_scan_time = Some(t0);
        Ok(OdometryRecord {
            timestamp: t0,
            state,
            covariance_diagonal: diag,
            matching: None,
            keyframe_inserted: true,
            status: ScanStatus::Bootstrap,
            imu_samples,
        })
    }

    /// Preintegration from `start` through `batch`, ending exactly at `end`.
    fn predict(
        &self,
        start: &NavState,
        cov: &StateCovariance,
        carry: Option<StepCarry>,
        batch: &[ImuSample],
        end: f64,
    ) -> Result<Preintegration, crate::preintegration::PreintegrationError> {
        let noise = self.config.noise_params();
        let gap = self.config.pipeline.max_imu_gap;
        let mut pre = preintegrate_batch(start, cov, batch, carry, &noise, gap)?;
        pre.extend_to(end, &noise, gap)?;
        Ok(pre)
    }

    fn track(&mut self, cloud: &ScanCloud) -> Result<OdometryRecord, PipelineError> {
        let filter = self.filter.clone().expect("initialized");
        let t_prev = self.last_scan_time.expect("initialized");
        let t = cloud.timestamp;
        let dt = t - t_prev;
        let batch = self.buffer.drain_interval(t_prev, t);

        let (trajectory, predicted, predicted_cov, carry) =
            match self.predict(&filter.state, &filter.covariance, filter.carry, &batch, t) {
                Ok(pre) => {
                    let predicted = *pre.predicted();
                    (pre.trajectory, predicted, pre.covariance, pre.carry)
                }
                Err(e) => {
                    if !batch.is_empty() {
                        log::warn!("preintegration failed at scan {t}: {e}; holding the pose");
                    }
                    let mut cov = filter.covariance.0;
                    for i in 0..15 {
                        cov[(i, i)] += self.config.noise.q * dt;
                    }
                    let mut held = filter.state;
                    held.timestamp = t;
                    (
                        constant_trajectory(&filter.state, t),
                        held,
                        StateCovariance::symmetrized(cov),
                        None,
                    )
                }
            };
        self.last_scan_time = Some(t);

        let fallback = |this: &mut Self, status: ScanStatus, matching: Option<MatchSummary>| {
            this.filter = Some(Filter {
                state: predicted,
                covariance: predicted_cov,
                carry,
            });
            this.previous = None;
            OdometryRecord {
                timestamp: t,
                state: predicted,
                covariance_diagonal: predicted_cov.diagonal(),
                matching,
                keyframe_inserted: false,
                status,
                imu_samples: batch.len(),
            }
        };

        let deskewed = deskew(
            cloud,
            &trajectory,
            &predicted.pose,
            &self.config.extrinsics(),
        )
        .cloud;
        let filtered = voxel_downsample(&deskewed, self.config.matcher.voxel_resolution)?;
        if filtered.len()
            < self
                .config
                .pipeline
                .min_scan_points
                .max(self.config.matcher.k_neighbors)
        {
            log::warn!(
                "scan at {t} has only {} points after filtering",
                filtered.len()
            );
            return Ok(fallback(self, ScanStatus::Degenerate, None));
        }
        let source = GicpSource::new(filtered.positions(), self.config.matcher.k_neighbors)?;
        let map = self.map.clone().expect("map exists after bootstrap");
        let matched =
            match gicp_align_prepared(&source, &map, &predicted.pose, &self.config.gicp_params()) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("registration failed at scan {t}: {e}");
                    return Ok(fallback(self, ScanStatus::RegistrationFailed, None));
                }
            };
        let summary = MatchSummary {
            correspondence_rate: matched.correspondence_rate,
            iterations: matched.iterations,
            converged: matched.converged,
            final_cost: matched.final_cost,
        };

        let gravity = self.config.gravity();
        let update = build_measurement(&matched.pose, self.previous.as_ref(), &batch, &gravity, dt)
            .and_then(|z| {
                let r = build_measurement_noise(&matched.hessian, &self.config.measurement_noise());
                kalman_update(&predicted, &predicted_cov, &z, &r).map(|post| (z, post))
            });
        let (z, (mut state, covariance)) = match update {
            Ok(v) => v,
            Err(e) => {
                log::warn!("update failed at scan {t}: {e}");
                return Ok(fallback(self, ScanStatus::UpdateFailed, Some(summary)));
            }
        };
        state.timestamp = t;
        state.pose.rotation = state.pose.rotation.renormalized();
        self.filter = Some(Filter {
            state,
            covariance,
            carry,
        });
        self.previous = Some(PreviousMatch {
            pose: matched.pose,
            velocity: z.mask.velocity.then_some(z.velocity),
        });

        let insert = should_insert_keyframe(
            matched.correspondence_rate,
            self.config.mapping.gamma_threshold,
            &self.keyframes,
        );
        if insert {
            self.keyframes.insert(state.pose, filtered)?;
            self.rebuild_map(&matched.pose.translation)?;
        }
        Ok(OdometryRecord {
            timestamp: t,
            state,
            covariance_diagonal: covariance.diagonal(),
            matching: Some(summary),
            keyframe_inserted: insert,
            status: ScanStatus::Updated,
            imu_samples: batch.len(),
        })
    }

    fn rebuild_map(&mut self, center: &Vector3<f64>) -> Result<(), PipelineError> {
        let m = &self.config.matcher;
        let map = build_local_map(
            &self.keyframes,
            center,
            self.config.mapping.keyframe_count,
            m.voxel_resolution,
            m.k_neighbors,
        )?;
        self.map = Some(Arc::new(map));
        Ok(())
    }

    pub fn snapshot(&self) -> PipelineSnapshot {
        PipelineSnapshot {
            state: self.filter.as_ref().map(|f| f.state),
            covariance_diagonal: self.filter.as_ref().map(|f| f.covariance.diagonal()),
            scans_processed: self.records.len(),
            failed_scans: self
                .records
                .iter()
                .filter(|r| r.status.is_failure())
                .count(),
            keyframes: self.keyframes.len(),
            map_points: self.map.as_ref().map_or(0, |m| m.len()),
            imu_buffered: self.buffer.len(),
            imu_overflow_drops: self.buffer.overflow_drops(),
            imu_out_of_order_drops: self.buffer.out_of_order_drops(),
        }
    }

    /// Output-frame trajectory for all records so far.
    pub fn trajectory(&self) -> Vec<StampedPose> {
        let out = self.config.imu_from_output();
        self.records
            .iter()
            .map(|r| StampedPose {
                timestamp: r.timestamp,
                pose: r.state.pose * out,
            })
            .collect()
    }

    /// All keyframe clouds in the world frame, voxel-filtered.
    pub fn global_map(&self) -> Vec<Vector3<f64>> {
        let points: Vec<_> = self
            .keyframes
            .keyframes()
            .iter()
            .flat_map(|k| {
                k.cloud
                    .points
                    .iter()
                    .map(move |p| k.pose.transform_point(&p.position))
            })
            .collect();
        voxel_downsample_points(&points, self.config.matcher.voxel_resolution).unwrap_or_default()
    }

    pub fn finalize(&self) -> PipelineOutput {
        PipelineOutput {
            records: self.records.clone(),
            trajectory: self.trajectory(),
            map: self.global_map(),
        }
    }
}

fn constant_trajectory(start: &NavState, end: f64) -> PreintegrationTrajectory {
    let mut held = *start;
    held.timestamp = end;
    held.velocity = Vector3::zeros();
    let mut first = *start;
    first.velocity = Vector3::zeros();
    PreintegrationTrajectory {
        entries: vec![
            TrajectoryEntry {
                state: first,
                angular_rate: Vector3::zeros(),
            },
            TrajectoryEntry {
                state: held,
                angular_rate: Vector3::zeros(),
            },
        ],
    }
}

/// Runs a whole event stream through a fresh pipeline. Scans that cannot be
/// processed at all are skipped with a warning.
pub fn replay(config: Config, events: impl IntoIterator<Item = Event>) -> PipelineOutput {
    let mut pipeline = Pipeline::new(config);
    for event in events {
        if let Err(e) = pipeline.handle(event) {
            log::warn!("scan skipped: {e}");
        }
    }
    pipeline.finalize()
}
