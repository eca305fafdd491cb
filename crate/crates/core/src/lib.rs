//! Multi-lidar, multi-IMU and GNSS state estimation.

pub mod geometry;
pub mod sync;
pub mod mimu;
pub mod allan;
pub mod preint;
pub mod rig;
pub mod sim;
pub mod graph;
pub mod lidar;
pub mod io;
pub mod eval;
pub mod config;
pub mod pipeline;
