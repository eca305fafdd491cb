//! Synthetic driving scenarios: ground-truth motion from twist segments and
//! the multi-IMU, multi-lidar and GNSS measurements it would produce.

mod lidar;
pub mod presets;
mod world;

pub use lidar::synth_lidar;
pub use world::{Aabb, Plane, World};

use std::collections::BTreeMap;

use nalgebra::{Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{se3_exp, skew, NavState, Pose, Timestamp};
use crate::graph::GnssFix;
use crate::lidar::LidarScan;
use crate::mimu::ImuSample;
use crate::preint::gravity_vector;
use crate::rig::Rig;
use crate::sync::{Mount, SensorId};

/// Step of the internal pose grid, seconds.
const GRID_STEP: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("world has no surfaces")]
    EmptyWorld,
}

/// Body-frame twist `(ω, v)` held for `duration` seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub twist: [f64; 6],
}

impl Segment {
    pub fn new(duration: f64, omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { duration, twist: [omega.x, omega.y, omega.z, v.x, v.y, v.z] }
    }

    fn xi(&self) -> Vector6<f64> {
        Vector6::from_row_slice(&self.twist)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    pub imu_hz: f64,
    pub lidar_hz: f64,
    pub gnss_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self { imu_hz: 100.0, lidar_hz: 10.0, gnss_hz: 5.0 }
    }
}

/// Noise levels. IMU white noise comes from the rig calibration, scaled by
/// `imu_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub imu_scale: f64,
    pub acc_bias_sigma: f64,
    pub gyro_bias_sigma: f64,
    pub lidar_range_sigma: f64,
    pub gnss_sigma: f64,
    /// Error of the initial heading handed to the estimator, degrees.
    pub heading_sigma_deg: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            imu_scale: 1.0,
            acc_bias_sigma: 0.01,
            gyro_bias_sigma: 2e-4,
            lidar_range_sigma: 0.02,
            gnss_sigma: 0.5,
            heading_sigma_deg: 0.2,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            imu_scale: 0.0,
            acc_bias_sigma: 0.0,
            gyro_bias_sigma: 0.0,
            lidar_range_sigma: 0.0,
            gnss_sigma: 0.0,
            heading_sigma_deg: 0.0,
        }
    }
}

/// Removal of one sensor's messages stamped in `[start, end)` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    /// `imu:F_L`, `lidar:R_R` or `gnss`.
    pub sensor: String,
    pub start: f64,
    pub end: f64,
}

impl Dropout {
    pub fn new(sensor: SensorId, start: f64, end: f64) -> Self {
        Self { sensor: sensor.to_string(), start, end }
    }

    pub fn sensor_id(&self) -> Result<SensorId, SimError> {
        self.sensor.parse().map_err(|_| SimError::Invalid(format!("unknown dropout sensor '{}'", self.sensor)))
    }

    fn covers(&self, t: Timestamp) -> bool {
        t >= Timestamp::from_secs(self.start) && t < Timestamp::from_secs(self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Length of the linear blend between consecutive twists, seconds.
    /// Zero gives piecewise-constant twist.
    pub smooth_ramp: f64,
    /// Truncates the trajectory, seconds.
    pub max_duration: Option<f64>,
    pub start_pose: Pose,
    pub segments: Vec<Segment>,
    pub rates: Rates,
    pub noise: NoiseConfig,
    pub world: World,
    pub rig: Rig,
    pub dropouts: Vec<Dropout>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 0,
            smooth_ramp: 0.0,
            max_duration: None,
            start_pose: Pose::identity(),
            segments: Vec::new(),
            rates: Rates::default(),
            noise: NoiseConfig::default(),
            world: World::default(),
            rig: Rig::vehicle(),
            dropouts: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn duration(&self) -> f64 {
        let total: f64 = self.segments.iter().map(|s| s.duration).sum();
        self.max_duration.map_or(total, |m| m.min(total))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(m));
        if self.segments.is_empty() {
            return bad("no trajectory segments".into());
        }
        if let Some(s) = self.segments.iter().find(|s| !(s.duration > 0.0) || s.twist.iter().any(|x| !x.is_finite())) {
            return bad(format!("segment with duration {} or non-finite twist", s.duration));
        }
        let r = &self.rates;
        if !(r.imu_hz > 0.0 && r.lidar_hz > 0.0 && r.gnss_hz > 0.0) {
            return bad("rates must be positive".into());
        }
        if r.gnss_hz > r.imu_hz {
            return bad("gnss rate exceeds imu rate".into());
        }
        if !(self.smooth_ramp >= 0.0) {
            return bad("negative ramp".into());
        }
        if matches!(self.max_duration, Some(m) if !(m > 0.0)) {
            return bad("max_duration must be positive".into());
        }
        let span = self.duration();
        for d in &self.dropouts {
            d.sensor_id()?;
            if !(d.start >= 0.0 && d.start < d.end && d.end <= span + 1e-9) {
                return bad(format!("dropout [{}, {}) of {} outside [0, {span}]", d.start, d.end, d.sensor));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

/// Twist as a function of time, with optional linear blends.
#[derive(Clone, Debug)]
struct TwistProfile {
    starts: Vec<f64>,
    twists: Vec<Vector6<f64>>,
    ramps: Vec<f64>,
    end: f64,
}

impl TwistProfile {
    fn new(scenario: &Scenario) -> Self {
        let mut starts = Vec::new();
        let mut twists = Vec::new();
        let mut ramps = Vec::new();
        let mut t = 0.0;
        for s in &scenario.segments {
            starts.push(t);
            twists.push(s.xi());
            ramps.push(scenario.smooth_ramp.min(0.5 * s.duration));
            t += s.duration;
        }
        Self { starts, twists, ramps, end: scenario.duration() }
    }

    fn segment(&self, t: f64) -> usize {
        self.starts.partition_point(|&s| s <= t).saturating_sub(1)
    }

    /// Twist and its time derivative.
    fn at(&self, t: f64) -> (Vector6<f64>, Vector6<f64>) {
        let k = self.segment(t);
        let prev = if k == 0 { Vector6::zeros() } else { self.twists[k - 1] };
        let into = t - self.starts[k];
        if self.ramps[k] > 0.0 && into < self.ramps[k] {
            let rate = (self.twists[k] - prev) / self.ramps[k];
            (prev + rate * into, rate)
        } else {
            (self.twists[k], Vector6::zeros())
        }
    }

    fn breakpoints_in(&self, a: f64, b: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .starts
            .iter()
            .zip(&self.ramps)
            .flat_map(|(&s, &r)| [s, s + r])
            .filter(|&x| x > a && x < b)
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Pose at `b` given the pose at `a`, splitting at twist breakpoints and
    /// using the midpoint twist on each piece.
    fn advance(&self, pose: &Pose, a: f64, b: f64) -> Pose {
        let mut p = *pose;
        let mut t = a;
        for cut in self.breakpoints_in(a, b).into_iter().chain(std::iter::once(b)) {
            let h = cut - t;
            if h > 0.0 {
                let (xi, _) = self.at(t + 0.5 * h);
                p = p.compose(&se3_exp(&(xi * h)));
            }
            t = cut;
        }
        p
    }
}

/// Continuous ground-truth motion of the vehicle base.
#[derive(Clone, Debug)]
pub struct Motion {
    profile: TwistProfile,
    grid: Vec<Pose>,
}

impl Motion {
    pub fn new(scenario: &Scenario) -> Self {
        let profile = TwistProfile::new(scenario);
        let n = (profile.end / GRID_STEP).ceil() as usize + 1;
        let mut grid = Vec::with_capacity(n);
        grid.push(scenario.start_pose);
        for k in 1..n {
            let p = profile.advance(&grid[k - 1], (k - 1) as f64 * GRID_STEP, k as f64 * GRID_STEP);
            grid.push(p);
        }
        Self { profile, grid }
    }

    pub fn duration(&self) -> f64 {
        self.profile.end
    }

    /// world ← base at `t` seconds.
    pub fn pose_at(&self, t: f64) -> Pose {
        let t = t.clamp(0.0, self.profile.end);
        let k = ((t / GRID_STEP).floor() as usize).min(self.grid.len() - 1);
        self.profile.advance(&self.grid[k], k as f64 * GRID_STEP, t)
    }

    /// Body-frame twist `(ω, v)` and its derivative at `t`.
    pub fn twist_at(&self, t: f64) -> (Vector6<f64>, Vector6<f64>) {
        self.profile.at(t.clamp(0.0, self.profile.end))
    }

    pub fn state_at(&self, t: f64) -> NavState {
        let pose = self.pose_at(t);
        let (xi, _) = self.twist_at(t);
        let w = xi.fixed_rows::<3>(0).into_owned();
        let v = xi.fixed_rows::<3>(3).into_owned();
        NavState { velocity: pose.rotation * v, angular_rate: w, ..NavState::at(pose) }
    }

    /// True base-frame inertial quantities `(f_B, ω, ω̇)` at `t`.
    pub fn inertial_at(&self, t: f64) -> BaseInertial {
        let pose = self.pose_at(t);
        let (xi, dxi) = self.twist_at(t);
        let w = xi.fixed_rows::<3>(0).into_owned();
        let v = xi.fixed_rows::<3>(3).into_owned();
        let dv = dxi.fixed_rows::<3>(3).into_owned();
        let g = gravity_vector(crate::preint::GRAVITY);
        let acc = w.cross(&v) + dv - pose.rotation.inverse() * g;
        BaseInertial { stamp: Timestamp::from_secs(t), acc, gyro: w, ang_acc: dxi.fixed_rows::<3>(0).into_owned() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseInertial {
    pub stamp: Timestamp,
    pub acc: Vector3<f64>,
    pub gyro: Vector3<f64>,
    pub ang_acc: Vector3<f64>,
}

/// Reference states and noise-free base inertial stream at IMU rate.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub stamps: Vec<Timestamp>,
    pub states: Vec<NavState>,
    pub inertial: Vec<BaseInertial>,
}

impl GroundTruth {
    pub fn trajectory(&self) -> Vec<(Timestamp, Pose)> {
        self.stamps.iter().zip(&self.states).map(|(t, s)| (*t, s.pose)).collect()
    }
}

fn sample_times(duration: f64, hz: f64) -> Vec<f64> {
    let n = (duration * hz + 1e-9).floor() as usize;
    (0..=n).map(|k| k as f64 / hz).collect()
}

pub fn gen_trajectory(scenario: &Scenario) -> Result<(Motion, GroundTruth), SimError> {
    scenario.validate()?;
    let motion = Motion::new(scenario);
    let times = sample_times(motion.duration(), scenario.rates.imu_hz);
    let gt = GroundTruth {
        stamps: times.iter().map(|&t| Timestamp::from_secs(t)).collect(),
        states: times.iter().map(|&t| motion.state_at(t)).collect(),
        inertial: times.iter().map(|&t| motion.inertial_at(t)).collect(),
    };
    Ok((motion, gt))
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent generator for one named stream.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name)))
}

fn gauss3(rng: &mut ChaCha8Rng, sigma: &Vector3<f64>) -> Vector3<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Vector3::new(n.sample(rng) * sigma.x, n.sample(rng) * sigma.y, n.sample(rng) * sigma.z)
}

/// Per-channel readings of the rig's IMUs.
///
/// Each channel senses the base motion at its lever arm in its own axes,
/// plus a constant bias and white noise.
pub fn synth_imu(gt: &GroundTruth, rig: &Rig, noise: &NoiseConfig, seed: u64) -> BTreeMap<Mount, Vec<ImuSample>> {
    let mut out = BTreeMap::new();
    for c in &rig.imus {
        let mut rng = stream_rng(seed, &SensorId::Imu(c.mount).to_string());
        let ba = gauss3(&mut rng, &Vector3::repeat(noise.acc_bias_sigma));
        let bg = gauss3(&mut rng, &Vector3::repeat(noise.gyro_bias_sigma));
        let acc_sigma = c.acc_noise_var.map(f64::sqrt) * noise.imu_scale;
        let gyro_sigma = c.gyro_noise_var.map(f64::sqrt) * noise.imu_scale;
        let samples = gt
            .inertial
            .iter()
            .map(|b| {
                let w = skew(&b.gyro);
                let at_lever = b.acc + w * w * c.lever + b.ang_acc.cross(&c.lever);
                let acc = c.rotation * at_lever + ba + gauss3(&mut rng, &acc_sigma);
                let gyro = c.rotation * b.gyro + bg + gauss3(&mut rng, &gyro_sigma);
                ImuSample::new(b.stamp, acc, gyro)
            })
            .collect();
        out.insert(c.mount, samples);
    }
    out
}

/// Antenna positions with isotropic Gaussian error of `sigma` meters.
pub fn synth_gnss(motion: &Motion, hz: f64, sigma: f64, lever: &Vector3<f64>, seed: u64) -> Vec<GnssFix> {
    let mut rng = stream_rng(seed, &SensorId::Gnss.to_string());
    sample_times(motion.duration(), hz)
        .into_iter()
        .map(|t| {
            let pose = motion.pose_at(t);
            let p = pose.transform_point(lever) + gauss3(&mut rng, &Vector3::repeat(sigma));
            GnssFix::new(Timestamp::from_secs(t), p, sigma * sigma)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SensorStreams {
    pub imu: BTreeMap<Mount, Vec<ImuSample>>,
    pub lidar: BTreeMap<Mount, Vec<LidarScan>>,
    pub gnss: Vec<GnssFix>,
}

/// Removes messages of each dropout's sensor stamped inside its interval.
/// Scans are dropped by their start stamp.
pub fn inject_dropout(mut streams: SensorStreams, dropouts: &[Dropout]) -> Result<SensorStreams, SimError> {
    for d in dropouts {
        if !(d.start <= d.end) {
            return Err(SimError::Invalid(format!("dropout end {} before start {}", d.end, d.start)));
        }
        match d.sensor_id()? {
            SensorId::Imu(m) => {
                if let Some(v) = streams.imu.get_mut(&m) {
                    v.retain(|s| !d.covers(s.stamp));
                }
            }
            SensorId::Lidar(m) => {
                if let Some(v) = streams.lidar.get_mut(&m) {
                    v.retain(|s| !d.covers(s.start));
                }
            }
            SensorId::Gnss => streams.gnss.retain(|f| !d.covers(f.stamp)),
        }
    }
    Ok(streams)
}

/// Everything produced by one scenario.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenario: Scenario,
    pub truth: GroundTruth,
    pub streams: SensorStreams,
    /// Heading handed to the estimator for initialization, radians.
    pub initial_yaw: f64,
}

/// Yaw of a pose's x axis in the world xy plane.
pub fn yaw_of(pose: &Pose) -> f64 {
    let x = pose.rotation * Vector3::x();
    x.y.atan2(x.x)
}

pub fn simulate(scenario: &Scenario) -> Result<Dataset, SimError> {
    let (motion, truth) = gen_trajectory(scenario)?;
    let seed = scenario.seed;
    let imu = synth_imu(&truth, &scenario.rig, &scenario.noise, seed);
    let lidar = synth_lidar(
        &motion,
        &scenario.world,
        &scenario.rig.lidars,
        scenario.rates.lidar_hz,
        scenario.noise.lidar_range_sigma,
        seed,
    )?;
    let gnss = synth_gnss(&motion, scenario.rates.gnss_hz, scenario.noise.gnss_sigma, &scenario.rig.gnss_lever, seed);
    let streams = inject_dropout(SensorStreams { imu, lidar, gnss }, &scenario.dropouts)?;
    let mut rng = stream_rng(seed, "init");
    let heading_err = Normal::new(0.0, 1.0).unwrap().sample(&mut rng) * scenario.noise.heading_sigma_deg.to_radians();
    let initial_yaw = yaw_of(&scenario.start_pose) + heading_err;
    Ok(Dataset { scenario: scenario.clone(), truth, streams, initial_yaw })
}
