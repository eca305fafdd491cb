//! Dataset directory layout and file formats.
//!
//! ```text
//! scenario.toml  calib.toml  init.toml
//! imu_<mount>.csv      t_ns,fx,fy,fz,wx,wy,wz
//! gnss.csv             t_ns,x,y,z,var
//! scans/<mount>/<n>.csv
//! gt.tum  gt_imu.csv
//! ```
//!
//! A scan file starts with `mount,start_ns,end_ns` followed by one
//! `t_offset_ns,x,y,z` row per point. Trajectories use the TUM format
//! `t x y z qx qy qz qw` with `t` in seconds.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Timestamp};
use crate::graph::GnssFix;
use crate::lidar::{LidarPoint, LidarScan};
use crate::mimu::{FusedImuSample, ImuSample};
use crate::rig::Rig;
use crate::sim::{BaseInertial, Dataset, Scenario, SensorStreams};
use crate::sync::Mount;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{path}: {msg}")]
    Toml { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_path_buf(), source }
}

/// Seconds with nanosecond digits, exact for any stamp.
pub fn format_secs(t: Timestamp) -> String {
    let ns = t.nanos();
    let sign = if ns < 0 { "-" } else { "" };
    let a = ns.unsigned_abs();
    format!("{sign}{}.{:09}", a / 1_000_000_000, a % 1_000_000_000)
}

/// Inverse of [`format_secs`]; also accepts fewer fraction digits or
/// exponent notation.
pub fn parse_secs(s: &str) -> Option<Timestamp> {
    let s = s.trim();
    if s.contains(['e', 'E']) {
        return s.parse::<f64>().ok().filter(|x| x.is_finite()).map(Timestamp::from_secs);
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    let whole: i64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    if !frac.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let mut digits: String = frac.chars().take(9).collect();
    while digits.len() < 9 {
        digits.push('0');
    }
    let ns = whole.checked_mul(1_000_000_000)?.checked_add(digits.parse::<i64>().ok()?)?;
    Some(Timestamp(if neg { -ns } else { ns }))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>, IoError> {
    Ok(csv::WriterBuilder::new().flexible(true).from_writer(create(path)?))
}

fn csv_reader(path: &Path, headers: bool, delim: u8) -> Result<csv::Reader<fs::File>, IoError> {
    csv::ReaderBuilder::new()
        .has_headers(headers)
        .flexible(true)
        .delimiter(delim)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T, IoError> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(i).ok_or_else(|| IoError::Parse { path: path.to_path_buf(), line, msg: format!("missing column {i}") })?;
    raw.parse().map_err(|_| IoError::Parse { path: path.to_path_buf(), line, msg: format!("bad value '{raw}' in column {i}") })
}

fn finite3(path: &Path, rec: &csv::StringRecord, at: usize) -> Result<Vector3<f64>, IoError> {
    let v = Vector3::new(field(path, rec, at)?, field(path, rec, at + 1)?, field(path, rec, at + 2)?);
    if v.iter().all(|x: &f64| x.is_finite()) {
        Ok(v)
    } else {
        let line = rec.position().map_or(0, |p| p.line());
        Err(IoError::Parse { path: path.to_path_buf(), line, msg: "non-finite value".into() })
    }
}

fn flush<W: Write>(path: &Path, mut w: csv::Writer<W>) -> Result<(), IoError> {
    w.flush().map_err(io_err(path))
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["t_ns", "fx", "fy", "fz", "wx", "wy", "wz"]).map_err(csv_err(path))?;
    for s in samples {
        let (a, g) = (s.acc, s.gyro);
        w.write_record(&[s.stamp.nanos().to_string(), a.x.to_string(), a.y.to_string(), a.z.to_string(), g.x.to_string(), g.y.to_string(), g.z.to_string()])
            .map_err(csv_err(path))?;
    }
    flush(path, w)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let mut r = csv_reader(path, true, b',')?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        out.push(ImuSample::new(Timestamp(field(path, &rec, 0)?), finite3(path, &rec, 1)?, finite3(path, &rec, 4)?));
    }
    Ok(out)
}

pub fn write_gnss_csv(path: &Path, fixes: &[GnssFix]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["t_ns", "x", "y", "z", "var"]).map_err(csv_err(path))?;
    for f in fixes {
        let p = f.position;
        let var = f.cov.trace() / 3.0;
        w.write_record(&[f.stamp.nanos().to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string(), var.to_string()])
            .map_err(csv_err(path))?;
    }
    flush(path, w)
}

pub fn read_gnss_csv(path: &Path) -> Result<Vec<GnssFix>, IoError> {
    let mut r = csv_reader(path, true, b',')?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let var: f64 = field(path, &rec, 4)?;
        if !(var >= 0.0) {
            let line = rec.position().map_or(0, |p| p.line());
            return Err(IoError::Parse { path: path.to_path_buf(), line, msg: format!("negative variance {var}") });
        }
        out.push(GnssFix::new(Timestamp(field(path, &rec, 0)?), finite3(path, &rec, 1)?, var));
    }
    Ok(out)
}

pub fn write_scan(path: &Path, scan: &LidarScan) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(&[scan.sensor.to_string(), scan.start.nanos().to_string(), scan.end.nanos().to_string()])
        .map_err(csv_err(path))?;
    for pt in &scan.points {
        let p = pt.p;
        w.write_record(&[(pt.t - scan.start).to_string(), format!("{:.5}", p.x), format!("{:.5}", p.y), format!("{:.5}", p.z)])
            .map_err(csv_err(path))?;
    }
    flush(path, w)
}

pub fn read_scan(path: &Path) -> Result<LidarScan, IoError> {
    let mut r = csv_reader(path, false, b',')?;
    let mut records = r.records();
    let head = match records.next() {
        Some(rec) => rec.map_err(csv_err(path))?,
        None => return Err(IoError::Parse { path: path.to_path_buf(), line: 1, msg: "empty scan file".into() }),
    };
    let sensor: Mount = field(path, &head, 0)?;
    let start = Timestamp(field(path, &head, 1)?);
    let end = Timestamp(field(path, &head, 2)?);
    let mut points = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_err(path))?;
        let off: i64 = field(path, &rec, 0)?;
        points.push(LidarPoint { t: start.offset(off), p: finite3(path, &rec, 1)? });
    }
    Ok(LidarScan { sensor, start, end, points })
}

pub fn write_tum(path: &Path, poses: &[(Timestamp, Pose)]) -> Result<(), IoError> {
    let mut w = create(path)?;
    for (t, p) in poses {
        let (tr, q) = (p.translation, p.rotation.coords);
        writeln!(w, "{} {} {} {} {} {} {} {}", format_secs(*t), tr.x, tr.y, tr.z, q.x, q.y, q.z, q.w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_tum(path: &Path) -> Result<Vec<(Timestamp, Pose)>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| IoError::Parse { path: path.to_path_buf(), line: i as u64 + 1, msg };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 8 {
            return Err(bad(format!("expected 8 columns, found {}", cols.len())));
        }
        let t = parse_secs(cols[0]).ok_or_else(|| bad(format!("bad time '{}'", cols[0])))?;
        let mut v = [0.0; 7];
        for (k, c) in cols[1..].iter().enumerate() {
            v[k] = c.parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| bad(format!("bad value '{c}'")))?;
        }
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        if q.norm() < 1e-9 {
            return Err(bad("zero quaternion".into()));
        }
        out.push((t, Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[0], v[1], v[2]))));
    }
    Ok(out)
}

/// Base-frame inertial stream: `t_ns,fx,fy,fz,wx,wy,wz,ax,ay,az`, where
/// `a` is angular acceleration.
pub fn write_inertial_csv(path: &Path, rows: &[BaseInertial]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["t_ns", "fx", "fy", "fz", "wx", "wy", "wz", "ax", "ay", "az"]).map_err(csv_err(path))?;
    for b in rows {
        let mut rec = vec![b.stamp.nanos().to_string()];
        rec.extend(b.acc.iter().chain(b.gyro.iter()).chain(b.ang_acc.iter()).map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    flush(path, w)
}

pub fn read_inertial_csv(path: &Path) -> Result<Vec<BaseInertial>, IoError> {
    let mut r = csv_reader(path, true, b',')?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let ang_acc = if rec.len() >= 10 { finite3(path, &rec, 7)? } else { Vector3::zeros() };
        out.push(BaseInertial {
            stamp: Timestamp(field(path, &rec, 0)?),
            acc: finite3(path, &rec, 1)?,
            gyro: finite3(path, &rec, 4)?,
            ang_acc,
        });
    }
    Ok(out)
}

pub fn write_fused_csv(path: &Path, rows: &[FusedImuSample]) -> Result<(), IoError> {
    let rows: Vec<BaseInertial> =
        rows.iter().map(|f| BaseInertial { stamp: f.stamp, acc: f.acc, gyro: f.gyro, ang_acc: f.ang_acc }).collect();
    write_inertial_csv(path, &rows)
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = toml::to_string(value).map_err(|e| IoError::Toml { path: path.to_path_buf(), msg: e.to_string() })?;
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| IoError::Toml { path: path.to_path_buf(), msg: e.to_string() })
}

/// One numeric column of a CSV file, with the `t_ns` column when present.
///
/// A first row that does not parse as numbers is taken as the header.
/// `column` is a header name or a zero-based index; without it the file must
/// have a single data column besides `t_ns`.
pub fn read_series(path: &Path, column: Option<&str>) -> Result<(Vec<f64>, Option<Vec<Timestamp>>), IoError> {
    let mut r = csv_reader(path, false, b',')?;
    let mut records = r.records();
    let parse_err = |line: u64, msg: String| IoError::Parse { path: path.to_path_buf(), line, msg };
    let Some(first) = records.next() else { return Ok((Vec::new(), None)) };
    let first = first.map_err(csv_err(path))?;
    let header: Option<Vec<String>> =
        first.iter().any(|f| f.trim().parse::<f64>().is_err()).then(|| first.iter().map(|f| f.trim().to_string()).collect());
    let width = first.len();
    let t_col = header.as_ref().and_then(|h| h.iter().position(|c| c == "t_ns"));
    let col = match column {
        Some(c) => match header.as_ref().and_then(|h| h.iter().position(|n| n == c)) {
            Some(i) => i,
            None => c.parse::<usize>().ok().filter(|i| *i < width).ok_or_else(|| parse_err(1, format!("no column '{c}'")))?,
        },
        None if width == 1 => 0,
        None if width == 2 && t_col.is_some() => 1 - t_col.unwrap(),
        None => return Err(parse_err(1, format!("{width} columns; choose one"))),
    };
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    let rows = header.is_none().then_some(Ok(first)).into_iter().chain(records);
    for rec in rows {
        let rec = rec.map_err(csv_err(path))?;
        let v: f64 = field(path, &rec, col)?;
        if !v.is_finite() {
            let line = rec.position().map_or(0, |p| p.line());
            return Err(parse_err(line, "non-finite value".into()));
        }
        values.push(v);
        if let Some(t) = t_col {
            stamps.push(Timestamp(field(path, &rec, t)?));
        }
    }
    Ok((values, t_col.map(|_| stamps)))
}

/// Initialization hints shipped with a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitHint {
    /// Initial heading, radians.
    pub yaw: f64,
}

pub const SCENARIO_FILE: &str = "scenario.toml";
pub const CALIB_FILE: &str = "calib.toml";
pub const INIT_FILE: &str = "init.toml";
pub const GNSS_FILE: &str = "gnss.csv";
pub const GT_FILE: &str = "gt.tum";
pub const GT_IMU_FILE: &str = "gt_imu.csv";
pub const SCANS_DIR: &str = "scans";

pub fn imu_file(mount: Mount) -> String {
    format!("imu_{mount}.csv")
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_toml(&dir.join(SCENARIO_FILE), &ds.scenario)?;
    write_toml(&dir.join(CALIB_FILE), &ds.scenario.rig)?;
    write_toml(&dir.join(INIT_FILE), &InitHint { yaw: ds.initial_yaw })?;
    for (m, samples) in &ds.streams.imu {
        write_imu_csv(&dir.join(imu_file(*m)), samples)?;
    }
    for (m, scans) in &ds.streams.lidar {
        let sub = dir.join(SCANS_DIR).join(m.name());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for (n, scan) in scans.iter().enumerate() {
            write_scan(&sub.join(format!("{n:06}.csv")), scan)?;
        }
    }
    write_gnss_csv(&dir.join(GNSS_FILE), &ds.streams.gnss)?;
    write_tum(&dir.join(GT_FILE), &ds.truth.trajectory())?;
    write_inertial_csv(&dir.join(GT_IMU_FILE), &ds.truth.inertial)
}

/// Dataset as read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub rig: Rig,
    pub streams: SensorStreams,
    pub initial_yaw: f64,
    pub scenario: Option<Scenario>,
    pub truth: Option<Vec<(Timestamp, Pose)>>,
}

/// Reads the sensor files of `mounts` (all rig mounts when `None`).
pub fn read_dataset(dir: &Path, mounts: Option<&[Mount]>) -> Result<LoadedDataset, IoError> {
    let rig: Rig = read_toml(&dir.join(CALIB_FILE))?;
    let init: InitHint = read_toml(&dir.join(INIT_FILE))?;
    let wanted = |m: Mount| mounts.is_none_or(|ms| ms.contains(&m));
    let mut streams = SensorStreams::default();
    for c in rig.imus.iter().filter(|c| wanted(c.mount)) {
        let path = dir.join(imu_file(c.mount));
        if path.exists() {
            streams.imu.insert(c.mount, read_imu_csv(&path)?);
        }
    }
    for l in rig.lidars.iter().filter(|l| wanted(l.mount)) {
        let sub = dir.join(SCANS_DIR).join(l.mount.name());
        if !sub.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&sub)
            .map_err(io_err(&sub))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        let mut scans = Vec::with_capacity(files.len());
        for f in &files {
            scans.push(read_scan(f)?);
        }
        scans.sort_by_key(|s| s.start);
        streams.lidar.insert(l.mount, scans);
    }
    let gnss = dir.join(GNSS_FILE);
    if gnss.exists() {
        streams.gnss = read_gnss_csv(&gnss)?;
    }
    let scenario = match dir.join(SCENARIO_FILE) {
        p if p.exists() => Some(read_toml(&p)?),
        _ => None,
    };
    let truth = match dir.join(GT_FILE) {
        p if p.exists() => Some(read_tum(&p)?),
        _ => None,
    };
    Ok(LoadedDataset { rig, streams, initial_yaw: init.yaw, scenario, truth })
}

/// Paths of every file in a dataset directory, relative and sorted.
pub fn manifest(dir: &Path) -> Result<BTreeMap<PathBuf, u64>, IoError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(io_err(&d))? {
            let e = e.map_err(io_err(&d))?;
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let len = e.metadata().map_err(io_err(&p))?.len();
                out.insert(p.strip_prefix(dir).unwrap_or(&p).to_path_buf(), len);
            }
        }
    }
    Ok(out)
}
