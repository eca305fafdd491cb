//! Trajectory and inertial-signal error metrics.

use std::fmt::Write as _;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Timestamp};

/// Default association tolerance between trajectories, nanoseconds.
pub const POSE_ASSOC_NS: i64 = 10_000_000;
/// Default association tolerance between inertial streams, nanoseconds.
pub const IMU_ASSOC_NS: i64 = 1_000_000;
pub const DEFAULT_RPE_DISTANCE: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectory stamps must be strictly increasing (at {0})")]
    NotIncreasing(Timestamp),
    #[error("no poses could be associated")]
    NoAssociation,
    #[error("no pose pair spans {0} m of ground-truth travel")]
    NoPairs(f64),
    #[error("no samples to compare")]
    Empty,
}

/// Time-ordered poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<(Timestamp, Pose)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(Timestamp, Pose)>) -> Result<Self, EvalError> {
        if let Some(w) = poses.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(EvalError::NotIncreasing(w[1].0));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[(Timestamp, Pose)] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Index of the pose closest in time to `t`, if within `tol` ns.
    pub fn nearest(&self, t: Timestamp, tol: i64) -> Option<usize> {
        let i = self.poses.partition_point(|(s, _)| *s < t);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&k| k < self.poses.len())
            .map(|k| (k, (self.poses[k].0 - t).abs()))
            .filter(|&(_, d)| d <= tol)
            .min_by_key(|&(_, d)| d)
            .map(|(k, _)| k)
    }

    /// Applies `g` on the left of every pose.
    pub fn transformed(&self, g: &Pose) -> Trajectory {
        Trajectory { poses: self.poses.iter().map(|(t, p)| (*t, g.compose(p))).collect() }
    }

    pub fn path_length(&self) -> f64 {
        self.poses.windows(2).map(|w| (w[1].1.translation - w[0].1.translation).norm()).sum()
    }
}

/// `(gt, est)` pose pairs matched by nearest stamp.
pub fn associate(gt: &Trajectory, est: &Trajectory, tol: i64) -> Vec<(Timestamp, Pose, Pose)> {
    est.poses
        .iter()
        .filter_map(|(t, e)| gt.nearest(*t, tol).map(|k| (*t, gt.poses[k].1, *e)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// A pair starts at every associated pose.
    #[default]
    All,
    /// Each pair starts where the previous one ended.
    Disjoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub trans: f64,
    pub rot_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpeResult {
    pub trans: f64,
    pub rot_deg: f64,
    pub pairs: Vec<PairError>,
}

/// Relative pose error over `distance` meters of ground-truth travel.
///
/// For each start pose `i`, `j` is the first later pose whose accumulated
/// ground-truth arc length from `i` reaches `distance`. The error of a pair
/// is `(G_i⁻¹G_j)⁻¹(E_i⁻¹E_j)`; its translation norm and rotation angle are
/// averaged in the RMS sense.
pub fn rpe(gt: &Trajectory, est: &Trajectory, distance: f64, pairing: Pairing) -> Result<RpeResult, EvalError> {
    let assoc = associate(gt, est, POSE_ASSOC_NS);
    if assoc.is_empty() {
        return Err(EvalError::NoAssociation);
    }
    let mut arc = vec![0.0; assoc.len()];
    for k in 1..assoc.len() {
        arc[k] = arc[k - 1] + (assoc[k].1.translation - assoc[k - 1].1.translation).norm();
    }
    let mut pairs = Vec::new();
    let mut i = 0;
    let mut j = 0;
    while i < assoc.len() {
        j = j.max(i + 1);
        while j < assoc.len() && arc[j] - arc[i] < distance {
            j += 1;
        }
        if j >= assoc.len() {
            break;
        }
        let (ti, gi, ei) = &assoc[i];
        let (tj, gj, ej) = &assoc[j];
        let d = gi.between(gj).inverse().compose(&ei.between(ej));
        pairs.push(PairError { t_start: *ti, t_end: *tj, trans: d.translation.norm(), rot_deg: d.angle().to_degrees() });
        i = match pairing {
            Pairing::All => i + 1,
            Pairing::Disjoint => j,
        };
    }
    if pairs.is_empty() {
        return Err(EvalError::NoPairs(distance));
    }
    let n = pairs.len() as f64;
    let trans = (pairs.iter().map(|p| p.trans * p.trans).sum::<f64>() / n).sqrt();
    let rot_deg = (pairs.iter().map(|p| p.rot_deg * p.rot_deg).sum::<f64>() / n).sqrt();
    Ok(RpeResult { trans, rot_deg, pairs })
}

/// `(APE, translation RMS)`: `√(1/N Σ‖G_i⁻¹E_i − I‖²_F)` over associated
/// poses, with no alignment, and the RMS position error in meters.
pub fn ape(gt: &Trajectory, est: &Trajectory) -> Result<(f64, f64), EvalError> {
    let assoc = associate(gt, est, POSE_ASSOC_NS);
    if assoc.is_empty() {
        return Err(EvalError::NoAssociation);
    }
    let n = assoc.len() as f64;
    let mut frob = 0.0;
    let mut trans = 0.0;
    for (_, g, e) in &assoc {
        frob += (g.inverse().compose(e).to_matrix() - Matrix4::identity()).norm_squared();
        trans += (g.translation - e.translation).norm_squared();
    }
    Ok(((frob / n).sqrt(), (trans / n).sqrt()))
}

/// Stamped `(specific force, angular rate)` pair.
pub type InertialRow = (Timestamp, Vector3<f64>, Vector3<f64>);

/// `(RMSE_acc, RMSE_gyro)` = `√(1/N ‖I_GT − Î‖²_F)` for each signal, over
/// samples associated within 1 ms.
pub fn imu_rmse(gt: &[InertialRow], est: &[InertialRow]) -> Result<(f64, f64), EvalError> {
    let mut acc = 0.0;
    let mut gyro = 0.0;
    let mut n = 0usize;
    let mut k = 0;
    for (t, a, w) in est {
        while k + 1 < gt.len() && (gt[k + 1].0 - *t).abs() <= (gt[k].0 - *t).abs() {
            k += 1;
        }
        let Some((tg, ag, wg)) = gt.get(k) else { break };
        if (*tg - *t).abs() > IMU_ASSOC_NS {
            continue;
        }
        acc += (ag - a).norm_squared();
        gyro += (wg - w).norm_squared();
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(((acc / n as f64).sqrt(), (gyro / n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rpe_distance: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
    pub ape: f64,
    pub ape_trans: f64,
    pub pairs_evaluated: usize,
    pub poses_associated: usize,
}

pub fn evaluate(gt: &Trajectory, est: &Trajectory, distance: f64, pairing: Pairing) -> Result<(MetricReport, RpeResult), EvalError> {
    let r = rpe(gt, est, distance, pairing)?;
    let (ape, ape_trans) = ape(gt, est)?;
    let report = MetricReport {
        rpe_distance: distance,
        rpe_trans: r.trans,
        rpe_rot: r.rot_deg,
        ape,
        ape_trans,
        pairs_evaluated: r.pairs.len(),
        poses_associated: associate(gt, est, POSE_ASSOC_NS).len(),
    };
    Ok((report, r))
}

/// Per-pair errors as `t_start,t_end,trans_m,rot_deg`.
pub fn pairs_csv(pairs: &[PairError]) -> String {
    let mut s = String::from("t_start,t_end,trans_m,rot_deg\n");
    for p in pairs {
        let _ = writeln!(s, "{},{},{},{}", p.t_start.as_secs(), p.t_end.as_secs(), p.trans, p.rot_deg);
    }
    s
}

/// One row per labelled run, columns `RPE (Translation[m], Rotation[°]) / APE`.
pub fn comparison_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$} | {:>14} | {:>14} | {:>10} | {:>10}", "Config", "RPE trans [m]", "RPE rot [deg]", "APE", "APE [m]");
    let _ = writeln!(s, "{}", "-".repeat(width + 62));
    for (label, r) in rows {
        let _ = writeln!(
            s,
            "{:<width$} | {:>14.4} | {:>14.4} | {:>10.4} | {:>10.4}",
            label, r.rpe_trans, r.rpe_rot, r.ape, r.ape_trans
        );
    }
    s
}
