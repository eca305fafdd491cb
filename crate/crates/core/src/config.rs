//! Run configuration and sensor selection.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GraphConfig;
use crate::lidar::{IcpConfig, SubmapConfig};
use crate::preint::{AlignConfig, ImuNoise};
use crate::sync::{Mount, SensorId, SyncConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid sensor mask '{0}', expected e.g. L4I4G1")]
    BadMask(String),
    #[error("sensor mask '{0}' needs at least one lidar and one IMU")]
    MaskTooSparse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
}

/// Number of lidars and IMUs used, and whether GNSS factors are enabled.
///
/// Sensors are taken in mount order F_L, F_R, R_L, R_R.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SensorMask {
    pub lidars: usize,
    pub imus: usize,
    pub gnss: bool,
}

impl Default for SensorMask {
    fn default() -> Self {
        Self { lidars: 4, imus: 4, gnss: true }
    }
}

impl SensorMask {
    pub fn lidar_mounts(&self) -> Vec<Mount> {
        Mount::ALL[..self.lidars].to_vec()
    }

    pub fn imu_mounts(&self) -> Vec<Mount> {
        Mount::ALL[..self.imus].to_vec()
    }

    pub fn sensors(&self) -> Vec<SensorId> {
        let mut out: Vec<SensorId> = self.lidar_mounts().into_iter().map(SensorId::Lidar).collect();
        out.extend(self.imu_mounts().into_iter().map(SensorId::Imu));
        out.push(SensorId::Gnss);
        out
    }
}

impl FromStr for SensorMask {
    type Err = ConfigError;

    /// Parses `L<n>I<m>` with an optional `G0`/`G1` suffix; without it GNSS is
    /// off.
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let bad = || ConfigError::BadMask(s.to_string());
        let b = s.trim().as_bytes();
        let digit = |i: usize, max: u8| -> Result<u8, ConfigError> {
            match b.get(i) {
                Some(c) if c.is_ascii_digit() && c - b'0' <= max => Ok(c - b'0'),
                _ => Err(bad()),
            }
        };
        if b.len() != 4 && b.len() != 6 {
            return Err(bad());
        }
        if !b[0].eq_ignore_ascii_case(&b'L') || !b[2].eq_ignore_ascii_case(&b'I') {
            return Err(bad());
        }
        let lidars = digit(1, 4)? as usize;
        let imus = digit(3, 4)? as usize;
        let gnss = if b.len() == 6 {
            if !b[4].eq_ignore_ascii_case(&b'G') {
                return Err(bad());
            }
            digit(5, 1)? == 1
        } else {
            false
        };
        if lidars == 0 || imus == 0 {
            return Err(ConfigError::MaskTooSparse(s.to_string()));
        }
        Ok(Self { lidars, imus, gnss })
    }
}

impl fmt::Display for SensorMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}I{}G{}", self.lidars, self.imus, u8::from(self.gnss))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    #[default]
    Mle,
    Average,
}

/// Keyframing, preprocessing and robustness settings of the estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Minimum time between keyframes, seconds.
    pub keyframe_interval: f64,
    /// Voxel edge used before registration, meters.
    pub voxel: f64,
    /// Points kept for registration after downsampling.
    pub icp_max_points: usize,
    /// Largest tolerated gap in the fused inertial stream, seconds.
    pub max_imu_gap: f64,
    /// A GNSS fix further than this from a keyframe is not used, seconds.
    pub gnss_max_offset: f64,
    /// Lower bound on the GNSS fix variance, m².
    pub gnss_min_var: f64,
    /// Between-factor covariance scale when registration is degenerate.
    pub degenerate_inflation: f64,
    pub fusion: FusionMethod,
    /// Bounded capacity of the channel between threads.
    pub channel_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            keyframe_interval: 0.5,
            voxel: 0.05,
            icp_max_points: 1500,
            max_imu_gap: 0.09,
            gnss_max_offset: 0.1,
            gnss_min_var: 1e-4,
            degenerate_inflation: 100.0,
            fusion: FusionMethod::Mle,
            channel_capacity: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset directory; the command line takes precedence.
    pub dataset: Option<PathBuf>,
    /// Output directory; the command line takes precedence.
    pub out: Option<PathBuf>,
    pub sensors: String,
    /// Seed of the registration subsampler.
    pub seed: u64,
    /// Arc length of the relative pose error, meters.
    pub rpe_distance: f64,
    pub pipeline: PipelineConfig,
    pub sync: SyncConfig,
    pub icp: IcpConfig,
    pub submap: SubmapConfig,
    pub graph: GraphConfig,
    pub imu_noise: ImuNoise,
    pub align: AlignConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: None,
            sensors: SensorMask::default().to_string(),
            seed: 0,
            rpe_distance: crate::eval::DEFAULT_RPE_DISTANCE,
            pipeline: PipelineConfig::default(),
            sync: SyncConfig::default(),
            icp: IcpConfig::default(),
            submap: SubmapConfig::default(),
            graph: GraphConfig::default(),
            imu_noise: ImuNoise::default(),
            align: AlignConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn mask(&self) -> Result<SensorMask, ConfigError> {
        self.sensors.parse()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.mask()?;
        self.sync.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let p = &self.pipeline;
        if !(p.keyframe_interval > 0.0) {
            return invalid("keyframe_interval must be positive");
        }
        if !(p.voxel > 0.0) {
            return invalid("voxel must be positive");
        }
        if !(p.max_imu_gap > 0.0 && p.max_imu_gap < crate::preint::MAX_STEP) {
            return invalid("max_imu_gap must lie in (0, 0.1) s");
        }
        if p.channel_capacity == 0 {
            return invalid("channel_capacity must be at least 1");
        }
        if !(p.gnss_min_var >= 0.0 && p.gnss_max_offset >= 0.0 && p.degenerate_inflation >= 1.0) {
            return invalid("GNSS and degeneracy settings out of range");
        }
        let s = &self.submap;
        if !(s.resolution > 0.0 && s.cell_size > 0.0 && s.box_side > 0.0) {
            return invalid("submap sizes must be positive");
        }
        if self.graph.window < 2 || self.graph.max_iterations == 0 {
            return invalid("graph window must hold two keyframes and max_iterations be positive");
        }
        if !(self.rpe_distance > 0.0) {
            return invalid("rpe_distance must be positive");
        }
        if !(self.align.t_static > 0.0) {
            return invalid("t_static must be positive");
        }
        Ok(())
    }
}
