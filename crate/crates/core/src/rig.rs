//! Sensor rig: IMU channel calibrations, lidar mounts and the GNSS antenna
//! lever arm, all relative to the vehicle base frame.

use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::mimu::{ImuChannelCalib, MimuArray, MimuError};
use crate::sync::Mount;

/// Scan pattern of a spinning multi-beam lidar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarModel {
    /// Horizontal field of view centered on the sensor x axis, degrees.
    pub fov_deg: f64,
    pub beams: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    pub azimuth_step_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            fov_deg: 270.0,
            beams: 16,
            min_elevation_deg: -15.0,
            max_elevation_deg: 15.0,
            azimuth_step_deg: 2.0,
            min_range: 0.5,
            max_range: 100.0,
        }
    }
}

impl LidarModel {
    pub fn elevations(&self) -> Vec<f64> {
        if self.beams == 1 {
            return vec![0.5 * (self.min_elevation_deg + self.max_elevation_deg).to_radians()];
        }
        let span = self.max_elevation_deg - self.min_elevation_deg;
        (0..self.beams)
            .map(|b| (self.min_elevation_deg + span * b as f64 / (self.beams - 1) as f64).to_radians())
            .collect()
    }

    /// Number of azimuth columns in one full revolution.
    pub fn columns(&self) -> usize {
        (360.0 / self.azimuth_step_deg).round().max(1.0) as usize
    }

    /// Whether the sensor-frame azimuth `az` (radians) lies in the field of view.
    pub fn sees(&self, az: f64) -> bool {
        let a = az.sin().atan2(az.cos());
        a.abs() <= 0.5 * self.fov_deg.to_radians() + 1e-12
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarMount {
    pub mount: Mount,
    /// base ← lidar.
    pub pose: Pose,
    #[serde(default)]
    pub model: LidarModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub gnss_lever: Vector3<f64>,
    pub imus: Vec<ImuChannelCalib>,
    pub lidars: Vec<LidarMount>,
}

impl Default for Rig {
    fn default() -> Self {
        Self::vehicle()
    }
}

impl Rig {
    /// Four sensor housings at the vehicle corners, each holding a lidar and
    /// an IMU that shares its axes. Accelerometer noise differs per channel.
    pub fn vehicle() -> Self {
        let corners = [
            (Mount::FrontLeft, Vector3::new(3.5, 1.0, 1.0), 45.0f64, 0.02, 1.0e-3),
            (Mount::FrontRight, Vector3::new(3.5, -1.0, 1.0), -45.0, 0.03, 1.5e-3),
            (Mount::RearLeft, Vector3::new(-1.0, 1.0, 1.0), 135.0, 0.025, 1.2e-3),
            (Mount::RearRight, Vector3::new(-1.0, -1.0, 1.0), -135.0, 0.04, 2.0e-3),
        ];
        let mut imus = Vec::new();
        let mut lidars = Vec::new();
        for (mount, pos, yaw, acc_sigma, gyro_sigma) in corners {
            let pose = Pose::from_yaw(yaw.to_radians(), pos);
            lidars.push(LidarMount { mount, pose, model: LidarModel::default() });
            imus.push(ImuChannelCalib {
                mount,
                rotation: pose.rotation.inverse(),
                lever: pos,
                acc_noise_var: Vector3::repeat(acc_sigma * acc_sigma),
                gyro_noise_var: Vector3::repeat(gyro_sigma * gyro_sigma),
            });
        }
        Self { gnss_lever: Vector3::new(0.5, 0.0, 1.8), imus, lidars }
    }

    pub fn imu(&self, mount: Mount) -> Option<&ImuChannelCalib> {
        self.imus.iter().find(|c| c.mount == mount)
    }

    pub fn lidar(&self, mount: Mount) -> Option<&LidarMount> {
        self.lidars.iter().find(|l| l.mount == mount)
    }

    /// base ← lidar extrinsics keyed by mount.
    pub fn lidar_extrinsics(&self) -> BTreeMap<Mount, Pose> {
        self.lidars.iter().map(|l| (l.mount, l.pose)).collect()
    }

    /// Array built from the channels whose mounts are listed, in rig order.
    pub fn mimu(&self, mounts: &[Mount]) -> Result<MimuArray, MimuError> {
        MimuArray::new(self.imus.iter().filter(|c| mounts.contains(&c.mount)).cloned().collect())
    }

    /// Rotation taking IMU-frame vectors to the base frame.
    pub fn imu_to_base(&self, mount: Mount) -> Option<UnitQuaternion<f64>> {
        self.imu(mount).map(|c| c.rotation.inverse())
    }
}
