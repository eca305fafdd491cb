use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand_distr::{Distribution, Normal};

use super::{stream_rng, Motion, SimError, World};
use crate::geometry::{secs_to_nanos, Timestamp};
use crate::lidar::{LidarPoint, LidarScan};
use crate::rig::LidarMount;
use crate::sync::{Mount, SensorId};

/// Ray-cast sweeps for every mount.
///
/// Each scan is one revolution; every azimuth column is fired at its own
/// instant from the sensor pose at that instant, so moving scans carry motion
/// distortion. Range noise is added along the ray.
pub fn synth_lidar(
    motion: &Motion,
    world: &World,
    mounts: &[LidarMount],
    hz: f64,
    range_sigma: f64,
    seed: u64,
) -> Result<BTreeMap<Mount, Vec<LidarScan>>, SimError> {
    if world.is_empty() {
        return Err(SimError::EmptyWorld);
    }
    let period = secs_to_nanos(1.0 / hz);
    let end = Timestamp::from_secs(motion.duration());
    let mut out = BTreeMap::new();
    for m in mounts {
        let mut rng = stream_rng(seed, &SensorId::Lidar(m.mount).to_string());
        let noise = Normal::new(0.0, range_sigma.max(0.0)).unwrap();
        let model = &m.model;
        let cols = model.columns();
        let elev: Vec<(f64, f64)> = model.elevations().into_iter().map(|e| (e.cos(), e.sin())).collect();
        let mut scans = Vec::new();
        let mut start = Timestamp(0);
        while start.offset(period) <= end {
            let center = motion.pose_at(start.as_secs()).transform_point(&m.pose.translation);
            let near = world.boxes_near(&center, model.max_range + 50.0);
            let mut points = Vec::new();
            for c in 0..cols {
                let az = -std::f64::consts::PI + c as f64 * std::f64::consts::TAU / cols as f64;
                if !model.sees(az) {
                    continue;
                }
                let t = start.offset(period * c as i64 / cols as i64);
                let sensor = motion.pose_at(t.as_secs()).compose(&m.pose);
                let (ca, sa) = (az.cos(), az.sin());
                for &(ce, se) in &elev {
                    let dir = Vector3::new(ce * ca, ce * sa, se);
                    let d = sensor.rotation * dir;
                    let Some(r) = world.raycast_subset(&sensor.translation, &d, model.min_range, model.max_range, &near) else {
                        continue;
                    };
                    let r = if range_sigma > 0.0 { r + noise.sample(&mut rng) } else { r };
                    points.push(LidarPoint { t, p: dir * r });
                }
            }
            scans.push(LidarScan { sensor: m.mount, start, end: start.offset(period), points });
            start = start.offset(period);
        }
        out.insert(m.mount, scans);
    }
    Ok(out)
}
