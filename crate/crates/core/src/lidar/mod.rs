//! Lidar scan handling: motion compensation, multi-lidar fusion, voxel
//! downsampling and registration against a local submap.

mod icp;
mod submap;

pub use icp::{icp_register, subsample, IcpConfig, IcpError, OdomEstimate};
pub use submap::{LocalSubmap, SubmapConfig};

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dq_pow, DualQuaternion, GeometryError, Pose, Timestamp};
use crate::sync::Mount;

/// Default voxel edge for downsampling, meters.
pub const DEFAULT_VOXEL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub t: Timestamp,
    pub p: Vector3<f64>,
}

/// One sweep of a single lidar, points in the sensor frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    pub sensor: Mount,
    pub start: Timestamp,
    pub end: Timestamp,
    pub points: Vec<LidarPoint>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScanError {
    #[error("scan from {0} has no points")]
    Empty(Mount),
    #[error("scan from {sensor}: point stamp {t} outside [{start}, {end}]")]
    StampOutOfRange { sensor: Mount, t: Timestamp, start: Timestamp, end: Timestamp },
}

impl LidarScan {
    pub fn validate(&self) -> Result<(), ScanError> {
        if self.points.is_empty() {
            return Err(ScanError::Empty(self.sensor));
        }
        if let Some(pt) = self.points.iter().find(|pt| pt.t < self.start || pt.t > self.end) {
            return Err(ScanError::StampOutOfRange { sensor: self.sensor, t: pt.t, start: self.start, end: self.end });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.end.secs_since(self.start)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeskewError {
    /// Zero-length scan whose points carry different stamps; the scan is
    /// returned unchanged.
    #[error("scan interval is empty but point stamps differ")]
    DegenerateInterval { passthrough: LidarScan },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Expresses every point in the sensor frame at `scan.start`.
///
/// `pose_i` and `pose_j` are world←sensor poses at the start and end of the
/// scan; intermediate poses follow the screw motion between them.
pub fn deskew(scan: &LidarScan, pose_i: &Pose, pose_j: &Pose) -> Result<LidarScan, DeskewError> {
    let span = scan.end - scan.start;
    if span <= 0 {
        if scan.points.iter().any(|pt| pt.t != scan.points[0].t) {
            return Err(DeskewError::DegenerateInterval { passthrough: scan.clone() });
        }
        return Ok(LidarScan {
            points: scan.points.iter().map(|pt| LidarPoint { t: scan.start, p: pt.p }).collect(),
            ..scan.clone()
        });
    }
    let rel = DualQuaternion::from_pose(&pose_i.between(pose_j));
    let mut cached: Option<(Timestamp, Pose)> = None;
    let mut points = Vec::with_capacity(scan.points.len());
    for pt in &scan.points {
        let motion = match cached {
            Some((t, m)) if t == pt.t => m,
            _ => {
                let eta = ((pt.t - scan.start) as f64 / span as f64).clamp(0.0, 1.0);
                let m = dq_pow(&rel, eta)?.to_pose();
                cached = Some((pt.t, m));
                m
            }
        };
        points.push(LidarPoint { t: scan.start, p: motion.transform_point(&pt.p) });
    }
    Ok(LidarScan { points, ..scan.clone() })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FuseError {
    #[error("no calibration for lidar {0}")]
    MissingCalibration(Mount),
}

/// Union of the scans' points expressed in the base frame, using base←lidar
/// extrinsics.
pub fn fuse_to_base<'a>(
    scans: impl IntoIterator<Item = &'a LidarScan>,
    calib: &BTreeMap<Mount, Pose>,
) -> Result<Vec<Vector3<f64>>, FuseError> {
    let mut out = Vec::new();
    for scan in scans {
        let t = calib.get(&scan.sensor).ok_or(FuseError::MissingCalibration(scan.sensor))?;
        out.extend(scan.points.iter().map(|pt| t.transform_point(&pt.p)));
    }
    Ok(out)
}

fn voxel_key(p: &Vector3<f64>, res: f64) -> (i64, i64, i64) {
    ((p.x / res).floor() as i64, (p.y / res).floor() as i64, (p.z / res).floor() as i64)
}

/// Centroid per occupied voxel, in order of first occupation.
///
/// # Panics
/// If `resolution` is not positive.
pub fn voxel_downsample(points: &[Vector3<f64>], resolution: f64) -> Vec<Vector3<f64>> {
    assert!(resolution > 0.0, "voxel resolution must be positive");
    let mut index: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(points.len());
    let mut sums: Vec<(Vector3<f64>, usize)> = Vec::new();
    for p in points {
        let k = voxel_key(p, resolution);
        let i = *index.entry(k).or_insert_with(|| {
            sums.push((Vector3::zeros(), 0));
            sums.len() - 1
        });
        sums[i].0 += p;
        sums[i].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n as f64).collect()
}

/// Inserts a registered world-frame cloud and crops the map to the sliding
/// box around `current_pose`.
pub fn map_update(map: &mut LocalSubmap, cloud: &[Vector3<f64>], current_pose: &Pose) {
    map.insert(cloud);
    map.crop(&current_pose.translation);
}
