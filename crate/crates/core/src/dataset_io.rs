//! File formats: IMU CSV, binary scans, PLY export, TUM trajectories,
//! odometry logs, and the on-disk dataset layout.
//!
//! Scan files (`.klio`) are little-endian:
//!
//! ```text
//! b"KLIO" | version: u32 = 1 | timestamp: f64 | count: u64
//! count × (x: f32, y: f32, z: f32, time_offset: f32, intensity: f32)
//! ```
//!
//! A missing intensity is stored as NaN.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::geometry::{Pose, Rotation};
use crate::pipeline::{OdometryRecord, StampedPose};
use crate::pointcloud::{ScanCloud, ScanPoint};
use crate::preintegration::ImuSample;
use crate::simulator::SimulatedDataset;

pub const SCAN_MAGIC: &[u8; 4] = b"KLIO";
pub const SCAN_VERSION: u32 = 1;
const SCAN_HEADER_LEN: usize = 4 + 4 + 8 + 8;
const SCAN_POINT_LEN: usize = 5 * 4;

pub const IMU_FILE: &str = "imu.csv";
pub const SCAN_DIR: &str = "scans";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.tum";
/// Ground truth in the Newer College CSV layout, used when no TUM file exists.
pub const GROUND_TRUTH_CSV_FILE: &str = "ground_truth.csv";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    let fixed = format!("{:.*}", decimals, x);
    if fixed.contains('.') {
        fixed
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        fixed
    }
}

pub fn write_imu_csv(samples: &[ImuSample], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::with_capacity(samples.len() * 96 + 32);
    out.push_str("timestamp_s,gx,gy,gz,ax,ay,az\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.timestamp, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        );
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn parse_imu_csv(text: &str, path: &Path) -> Result<Vec<ImuSample>, DatasetError> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if samples.is_empty() && i == 0 && fields.first().is_some_and(|f| f.parse::<f64>().is_err())
        {
            continue;
        }
        if fields.len() != 7 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 7 fields, found {}", fields.len()),
            ));
        }
        let mut v = [0.0; 7];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("invalid number {field:?}")))?;
        }
        samples.push(ImuSample::new(
            v[0],
            Vector3::new(v[1], v[2], v[3]),
            Vector3::new(v[4], v[5], v[6]),
        ));
    }
    if samples.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        log::warn!("{}: timestamps are not monotone; sorting", path.display());
        samples.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    Ok(samples)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_imu_csv(&text, path)
}

pub fn encode_scan(cloud: &ScanCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(SCAN_HEADER_LEN + cloud.len() * SCAN_POINT_LEN);
    buf.extend_from_slice(SCAN_MAGIC);
    buf.extend_from_slice(&SCAN_VERSION.to_le_bytes());
    buf.extend_from_slice(&cloud.timestamp.to_le_bytes());
    buf.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in &cloud.points {
        for v in [p.position.x, p.position.y, p.position.z, p.time_offset] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&p.intensity.unwrap_or(f32::NAN).to_le_bytes());
    }
    buf
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes a scan; `origin` is only used in error messages.
pub fn decode_scan(bytes: &[u8], origin: &Path) -> Result<ScanCloud, DatasetError> {
    if bytes.len() < SCAN_HEADER_LEN {
        return Err(format_err(
            origin,
            format!("truncated header ({} bytes)", bytes.len()),
        ));
    }
    if &bytes[0..4] != SCAN_MAGIC {
        return Err(format_err(origin, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SCAN_VERSION {
        return Err(format_err(origin, format!("unsupported version {version}")));
    }
    let timestamp = f64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(SCAN_POINT_LEN))
        .and_then(|n| n.checked_add(SCAN_HEADER_LEN))
        .ok_or_else(|| format_err(origin, format!("point count {count} too large")))?;
    if bytes.len() < expected {
        return Err(format_err(
            origin,
            format!("truncated payload: {} of {expected} bytes", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            origin,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    let points = bytes[SCAN_HEADER_LEN..]
        .chunks_exact(SCAN_POINT_LEN)
        .map(|c| {
            let intensity = f32_at(c, 16);
            ScanPoint {
                position: Vector3::new(
                    f32_at(c, 0) as f64,
                    f32_at(c, 4) as f64,
                    f32_at(c, 8) as f64,
                ),
                time_offset: f32_at(c, 12) as f64,
                intensity: (!intensity.is_nan()).then_some(intensity),
            }
        })
        .collect();
    Ok(ScanCloud::new(timestamp, points))
}

pub fn write_scan(cloud: &ScanCloud, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, encode_scan(cloud)).map_err(io_err(path))
}

pub fn read_scan(path: &Path) -> Result<ScanCloud, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_scan(&bytes, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Writes `x y z intensity` vertices; missing intensities are written as 0.
pub fn write_ply(
    points: &[(Vector3<f64>, Option<f32>)],
    path: &Path,
    format: PlyFormat,
) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let header = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n",
        points.len()
    );
    let mut write = || -> std::io::Result<()> {
        w.write_all(header.as_bytes())?;
        for (p, i) in points {
            let v = [p.x as f32, p.y as f32, p.z as f32, i.unwrap_or(0.0)];
            match format {
                PlyFormat::Ascii => writeln!(w, "{} {} {} {}", v[0], v[1], v[2], v[3])?,
                PlyFormat::BinaryLittleEndian => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()
    };
    write().map_err(io_err(path))
}

pub fn format_tum_line(timestamp: f64, pose: &Pose) -> String {
    let q = pose.rotation.to_quaternion();
    let t = &pose.translation;
    let fields = [t.x, t.y, t.z, q.i, q.j, q.k, q.w].map(format_g9);
    format!("{:.6} {}", timestamp, fields.join(" "))
}

pub fn trajectory_to_string(poses: &[StampedPose]) -> String {
    let mut s = String::with_capacity(poses.len() * 96);
    for p in poses {
        s.push_str(&format_tum_line(p.timestamp, &p.pose));
        s.push('\n');
    }
    s
}

pub fn write_trajectory(poses: &[StampedPose], path: &Path) -> Result<(), DatasetError> {
    fs::write(path, trajectory_to_string(poses)).map_err(io_err(path))
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<StampedPose>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        let mut v = [0.0f64; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("invalid number {f:?}")))?;
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 1e-9) || v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(path, i + 1, "invalid pose"));
        }
        out.push(StampedPose {
            timestamp: v[0],
            pose: Pose::new(
                Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q)),
                Vector3::new(v[1], v[2], v[3]),
            ),
        });
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<StampedPose>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_trajectory(&text, path)
}

/// Ground truth in the Newer College layout: `sec, nsec, x, y, z, qx, qy, qz, qw`
/// with an optional `#` header.
pub fn read_newer_college_ground_truth(path: &Path) -> Result<Vec<StampedPose>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected 9 fields, found {}", fields.len()),
            ));
        }
        let sec: i64 = fields[0]
            .parse()
            .map_err(|_| parse_err(path, i + 1, "invalid seconds"))?;
        let nsec: i64 = fields[1]
            .parse()
            .map_err(|_| parse_err(path, i + 1, "invalid nanoseconds"))?;
        let mut v = [0.0; 7];
        for (slot, f) in v.iter_mut().zip(&fields[2..]) {
            *slot = f
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("invalid number {f:?}")))?;
        }
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        out.push(StampedPose {
            timestamp: sec as f64 + nsec as f64 * 1e-9,
            pose: Pose::new(
                Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q)),
                Vector3::new(v[0], v[1], v[2]),
            ),
        });
    }
    Ok(out)
}

pub const ODOMETRY_LOG_COLUMNS: &str = "timestamp,status,x,y,z,qx,qy,qz,qw,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz,\
var_rx,var_ry,var_rz,var_px,var_py,var_pz,correspondence_rate,iterations,converged,keyframe,imu_samples";

/// Per-scan CSV preceded by the resolved configuration as `#` comment lines.
pub fn odometry_log_to_string(records: &[OdometryRecord], resolved_config: &str) -> String {
    let mut s = String::new();
    for line in resolved_config.lines() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str(ODOMETRY_LOG_COLUMNS);
    s.push('\n');
    for r in records {
        let st = &r.state;
        let q = st.pose.rotation.to_quaternion();
        let d = &r.covariance_diagonal;
        let mut fields: Vec<String> =
            vec![format!("{:.6}", r.timestamp), r.status.as_str().to_string()];
        fields.extend(
            [
                st.pose.translation.x,
                st.pose.translation.y,
                st.pose.translation.z,
                q.i,
                q.j,
                q.k,
                q.w,
            ]
            .into_iter()
            .chain(st.velocity.iter().copied())
            .chain(st.gyro_bias.iter().copied())
            .chain(st.accel_bias.iter().copied())
            .chain(d.iter().take(6).copied())
            .map(format_g9),
        );
        match &r.matching {
            Some(m) => {
                fields.push(format_g9(m.correspondence_rate));
                fields.push(m.iterations.to_string());
                fields.push(u8::from(m.converged).to_string());
            }
            None => fields.extend(["".into(), "".into(), "".into()]),
        }
        fields.push(u8::from(r.keyframe_inserted).to_string());
        fields.push(r.imu_samples.to_string());
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

pub fn write_odometry_log(
    records: &[OdometryRecord],
    resolved_config: &str,
    path: &Path,
) -> Result<(), DatasetError> {
    fs::write(path, odometry_log_to_string(records, resolved_config)).map_err(io_err(path))
}

/// Sensor streams loaded from a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<ScanCloud>,
    pub ground_truth: Option<Vec<StampedPose>>,
}

pub fn scan_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(SCAN_DIR).join(format!("{index:06}.klio"))
}

/// Writes `imu.csv`, `scans/NNNNNN.klio` and `ground_truth.tum` under `dir`.
pub fn write_dataset(dir: &Path, data: &SimulatedDataset) -> Result<(), DatasetError> {
    let scans = dir.join(SCAN_DIR);
    fs::create_dir_all(&scans).map_err(io_err(&scans))?;
    write_imu_csv(&data.imu, &dir.join(IMU_FILE))?;
    for (i, scan) in data.scans.iter().enumerate() {
        write_scan(scan, &scan_path(dir, i))?;
    }
    write_trajectory(&data.ground_truth, &dir.join(GROUND_TRUTH_FILE))
}

/// Reads a dataset directory. Scans are taken in file-name order. Ground
/// truth is optional and read from `ground_truth.tum`, or else from a
/// Newer College style `ground_truth.csv`.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let imu = read_imu_csv(&dir.join(IMU_FILE))?;
    let scan_dir = dir.join(SCAN_DIR);
    let mut files: Vec<PathBuf> = fs::read_dir(&scan_dir)
        .map_err(io_err(&scan_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "klio"))
        .collect();
    files.sort();
    let scans = files
        .iter()
        .map(|p| read_scan(p))
        .collect::<Result<Vec<_>, _>>()?;
    let tum = dir.join(GROUND_TRUTH_FILE);
    let csv = dir.join(GROUND_TRUTH_CSV_FILE);
    let ground_truth = if tum.exists() {
        Some(read_trajectory(&tum)?)
    } else if csv.exists() {
        Some(read_newer_college_ground_truth(&csv)?)
    } else {
        None
    };
    Ok(Dataset {
        imu,
        scans,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn g9_formatting() {
        assert_eq!(format_g9(0.0), "0");
        assert_eq!(format_g9(1.0), "1");
        assert_eq!(format_g9(-0.5), "-0.5");
        assert_eq!(format_g9(123456789.0), "123456789");
        assert_eq!(format_g9(1234567891.0), "1.23456789e+09");
        assert_eq!(format_g9(0.000123456789), "0.000123456789");
        assert_eq!(format_g9(1.5e-7), "1.5e-07");
        assert_eq!(format_g9(2.0 / 3.0), "0.666666667");
        // Expected strings produced by printf("%.9g").
        for (x, expected) in [
            (12.3456789012, "12.3456789"),
            (-98765.4321, "-98765.4321"),
            (1e-5, "1e-05"),
        ] {
            assert_eq!(format_g9(x), expected);
        }
    }

    #[test]
    fn identity_tum_line() {
        assert_eq!(
            format_tum_line(0.0, &Pose::identity()),
            "0.000000 0 0 0 0 0 0 1"
        );
    }

    #[test]
    fn imu_csv_single_row_and_errors() {
        let one = parse_imu_csv("0.1,0,0,0,0,0,9.81\n", p()).unwrap();
        assert_eq!(one.len(), 1);
        let err =
            parse_imu_csv("timestamp_s,gx,gy,gz,ax,ay,az\n0.1,0,0,0,0,9.81\n", p()).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn imu_csv_sorts_out_of_order_rows() {
        let s = parse_imu_csv("0.2,0,0,0,0,0,1\n0.1,0,0,0,0,0,2\n", p()).unwrap();
        assert_eq!(s[0].timestamp, 0.1);
        assert_eq!(s[0].accel.z, 2.0);
    }

    #[test]
    fn imu_csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<_> = (0..10_000)
            .map(|k| {
                let mut v = || rng.random_range(-20.0..20.0);
                ImuSample::new(
                    k as f64 * 0.005 + 0.0001,
                    Vector3::new(v(), v(), v()),
                    Vector3::new(v(), v(), v()),
                )
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.csv");
        write_imu_csv(&samples, &path).unwrap();
        assert_eq!(read_imu_csv(&path).unwrap(), samples);
        let first = fs::read(&path).unwrap();
        write_imu_csv(&read_imu_csv(&path).unwrap(), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn empty_scan_is_header_only() {
        let bytes = encode_scan(&ScanCloud::new(3.5, vec![]));
        assert_eq!(bytes.len(), SCAN_HEADER_LEN);
        let back = decode_scan(&bytes, p()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.timestamp, 3.5);
    }

    #[test]
    fn scan_rejects_bad_input() {
        let mut bytes = encode_scan(&ScanCloud::new(
            1.0,
            vec![ScanPoint::new(Vector3::x(), 0.0)],
        ));
        assert!(decode_scan(&bytes[..bytes.len() - 1], p()).is_err());
        bytes.push(0);
        assert!(decode_scan(&bytes, p())
            .unwrap_err()
            .to_string()
            .contains("trailing"));
        let mut bad = encode_scan(&ScanCloud::default());
        bad[0] = b'X';
        assert!(decode_scan(&bad, p())
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut ver = encode_scan(&ScanCloud::default());
        ver[4] = 2;
        assert!(decode_scan(&ver, p())
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    fn f32_exact_cloud(rng: &mut impl Rng, n: usize) -> ScanCloud {
        let mut f = |lo: f32, hi: f32| rng.random_range(lo..hi) as f64;
        let points = (0..n)
            .map(|i| ScanPoint {
                position: Vector3::new(f(-50.0, 50.0), f(-50.0, 50.0), f(-5.0, 5.0)),
                time_offset: f(0.0, 0.1),
                intensity: if i % 3 == 0 {
                    None
                } else {
                    Some(f(0.0, 255.0) as f32)
                },
            })
            .collect();
        ScanCloud::new(12.25, points)
    }

    #[test]
    fn scan_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = f32_exact_cloud(&mut rng, 1000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.klio");
        write_scan(&cloud, &path).unwrap();
        assert_eq!(read_scan(&path).unwrap(), cloud);
    }

    fn ply_vertex_count(bytes: &[u8]) -> (usize, usize) {
        let end = bytes
            .windows(11)
            .position(|w| w == b"end_header\n")
            .unwrap()
            + 11;
        let header = std::str::from_utf8(&bytes[..end]).unwrap();
        let n = header
            .lines()
            .find_map(|l| l.strip_prefix("element vertex "))
            .unwrap()
            .parse()
            .unwrap();
        (n, end)
    }

    #[test]
    fn ply_headers_match_payload() {
        let pts: Vec<_> = (0..37)
            .map(|i| (Vector3::new(i as f64, 0.5, -1.0), Some(i as f32)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ply");
        let b = dir.path().join("b.ply");
        write_ply(&pts, &a, PlyFormat::Ascii).unwrap();
        write_ply(&pts, &b, PlyFormat::BinaryLittleEndian).unwrap();
        let ascii = fs::read(&a).unwrap();
        let (n, end) = ply_vertex_count(&ascii);
        assert_eq!(n, 37);
        assert_eq!(
            std::str::from_utf8(&ascii[end..]).unwrap().lines().count(),
            37
        );
        let bin = fs::read(&b).unwrap();
        let (n, end) = ply_vertex_count(&bin);
        assert_eq!(n, 37);
        assert_eq!(bin.len() - end, 37 * 16);
        assert!(std::str::from_utf8(&bin[..end])
            .unwrap()
            .contains("format binary_little_endian 1.0"));
    }

    #[test]
    fn trajectory_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let poses: Vec<_> = (0..100)
            .map(|i| StampedPose {
                timestamp: i as f64 * 0.1,
                pose: Pose::new(
                    Rotation::exp(&Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    )),
                    Vector3::new(
                        rng.random_range(-100.0..100.0),
                        rng.random_range(-100.0..100.0),
                        rng.random_range(-10.0..10.0),
                    ),
                ),
            })
            .collect();
        let text = trajectory_to_string(&poses);
        let back = parse_trajectory(&text, p()).unwrap();
        assert_eq!(back.len(), poses.len());
        for (a, b) in back.iter().zip(&poses) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-6);
            assert!(a.pose.boxminus(&b.pose).to_vector().amax() < 1e-6);
        }
        assert_eq!(trajectory_to_string(&back), text);
        assert!(matches!(
            parse_trajectory("0 1 2 3\n", p()),
            Err(DatasetError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn newer_college_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        fs::write(
            &path,
            "#sec,nsec,x,y,z,qx,qy,qz,qw\n1583836591,182590976,1.0,2.0,3.0,0,0,0,1\n",
        )
        .unwrap();
        let gt = read_newer_college_ground_truth(&path).unwrap();
        assert_eq!(gt.len(), 1);
        assert!((gt[0].timestamp - 1_583_836_591.182_591).abs() < 1e-6);
        assert_eq!(gt[0].pose.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn scan_bytes_round_trip(seed in any::<u64>(), n in 0usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = f32_exact_cloud(&mut rng, n);
            let bytes = encode_scan(&cloud);
            let back = decode_scan(&bytes, p()).unwrap();
            prop_assert_eq!(&back, &cloud);
            prop_assert_eq!(encode_scan(&back), bytes);
        }
    }
}
