//! Three-stage estimator: replay and synchronization, lidar odometry, and
//! the fixed-lag factor graph.
//!
//! Stages run on their own threads and talk through bounded channels. The
//! odometry stage waits for the graph's estimate of each keyframe before it
//! predicts the next one, so results do not depend on thread timing.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;

use log::{debug, info, warn};
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, FusionMethod, RunConfig, SensorMask};
use crate::geometry::{NavState, Pose, Timestamp};
use crate::graph::{maybe_add_gnss, Factor, FactorGraph, GnssFix, GraphError};
use crate::lidar::{deskew, icp_register, map_update, subsample, voxel_downsample, DeskewError, IcpError, LidarScan, LocalSubmap};
use crate::mimu::{fuse_average_samples, fuse_mle_samples, FusedImuSample, ImuSample, MimuArray, MimuError};
use crate::preint::{gravity_align, gravity_vector, predict, AlignError, GravityInit, PreintError, PreintegratedDelta};
use crate::rig::Rig;
use crate::sim::SensorStreams;
use crate::sync::{Modality, Mount, QueueSet, SensorId, StampedSignal, SyncCounters, SyncError, SyncGroup};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no calibration for sensor {0}")]
    MissingCalibration(SensorId),
    #[error("no {0} data for the selected sensors")]
    NoData(&'static str),
    #[error("initialization failed: {0}")]
    Align(#[from] AlignError),
    #[error("IMU fusion failed: {0}")]
    Fusion(#[from] MimuError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("inertial stream interrupted between {from} and {to}")]
    ImuGap { from: Timestamp, to: Timestamp },
    #[error("estimator failure: {0}")]
    Estimator(String),
    #[error("pipeline stage stopped unexpectedly")]
    Disconnected,
}

impl PipelineError {
    /// Process exit code: 1 configuration, 2 input data, 3 estimator.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::MissingCalibration(_)
            | PipelineError::NoData(_)
            | PipelineError::Align(_)
            | PipelineError::Fusion(_)
            | PipelineError::Sync(_) => 2,
            PipelineError::ImuGap { .. } | PipelineError::Estimator(_) | PipelineError::Disconnected => 3,
        }
    }
}

impl From<GraphError> for PipelineError {
    fn from(e: GraphError) -> Self {
        PipelineError::Estimator(e.to_string())
    }
}

impl From<PreintError> for PipelineError {
    fn from(e: PreintError) -> Self {
        PipelineError::Estimator(e.to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncStageCounters {
    /// Messages fed to the synchronizer, by sensor name.
    pub consumed: BTreeMap<String, u64>,
    pub pushed: u64,
    pub late: u64,
    pub capacity_drops: u64,
    pub imu_groups: u64,
    pub imu_partial_groups: u64,
    pub lidar_groups: u64,
    pub lidar_partial_groups: u64,
    pub gnss_fixes: u64,
    pub implausible_imu: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OdometryCounters {
    pub keyframes: u64,
    pub scans_used: u64,
    /// Scans in groups between keyframes.
    pub scans_skipped: u64,
    /// Scans without inertial coverage at the end of the run.
    pub scans_dropped: u64,
    pub icp_runs: u64,
    pub icp_iterations: u64,
    pub icp_failures: u64,
    pub icp_degenerate: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphCounters {
    pub nodes: u64,
    pub optimizations: u64,
    pub lm_iterations: u64,
    pub between_factors: u64,
    pub gnss_in: u64,
    pub gnss_out: u64,
    /// Fixes not offered to the graph because GNSS is disabled.
    pub gnss_masked: u64,
    pub marginalized: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub sync: SyncStageCounters,
    pub odometry: OdometryCounters,
    pub graph: GraphCounters,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Smoothed keyframe poses (world←base).
    pub trajectory: Vec<(Timestamp, Pose)>,
    pub fused_imu: Vec<FusedImuSample>,
    pub init: GravityInit,
    pub counters: RunCounters,
}

enum Event<'a> {
    Imu(FusedImuSample),
    Scans(Timestamp, Vec<&'a LidarScan>),
    Gnss(GnssFix),
}

struct KeyframeMsg {
    stamp: Timestamp,
    guess: NavState,
    delta: PreintegratedDelta,
    gyro: Vector3<f64>,
    /// Odometry poses of the previous and this keyframe, and degeneracy.
    odom: Option<(Pose, Pose, bool)>,
    gnss: Option<GnssFix>,
}

enum GraphMsg {
    Init { stamp: Timestamp, state: NavState },
    Keyframe(Box<KeyframeMsg>),
}

fn send<T>(tx: &SyncSender<T>, msg: T) -> Result<(), PipelineError> {
    tx.send(msg).map_err(|_| PipelineError::Disconnected)
}

/// Runs the estimator over recorded streams.
pub fn run_pipeline(cfg: &RunConfig, rig: &Rig, streams: &SensorStreams, initial_yaw: f64) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let mask = cfg.mask()?;
    for m in mask.imu_mounts() {
        rig.imu(m).ok_or(PipelineError::MissingCalibration(SensorId::Imu(m)))?;
    }
    for m in mask.lidar_mounts() {
        rig.lidar(m).ok_or(PipelineError::MissingCalibration(SensorId::Lidar(m)))?;
    }
    if mask.imu_mounts().iter().all(|m| streams.imu.get(m).is_none_or(|v| v.is_empty())) {
        return Err(PipelineError::NoData("IMU"));
    }
    if mask.lidar_mounts().iter().all(|m| streams.lidar.get(m).is_none_or(|v| v.is_empty())) {
        return Err(PipelineError::NoData("lidar"));
    }

    let cap = cfg.pipeline.channel_capacity;
    let (ev_tx, ev_rx) = sync_channel::<Event>(cap);
    let (kf_tx, kf_rx) = sync_channel::<GraphMsg>(cap);
    let (snap_tx, snap_rx) = sync_channel::<NavState>(1);

    thread::scope(|s| {
        let sync = s.spawn(move || sync_stage(cfg, rig, streams, &mask, ev_tx));
        let graph = s.spawn(move || graph_stage(cfg, rig, &mask, kf_rx, snap_tx));
        let odom = odometry_stage(cfg, rig, initial_yaw, ev_rx, kf_tx, snap_rx);
        let sync = sync.join().unwrap_or(Err(PipelineError::Disconnected));
        let graph = graph.join().unwrap_or(Err(PipelineError::Disconnected));
        match (sync, odom, graph) {
            (Ok(sc), Ok((fused_imu, init, oc)), Ok((trajectory, gc))) => Ok(RunOutput {
                trajectory,
                fused_imu,
                init,
                counters: RunCounters { sync: sc, odometry: oc, graph: gc },
            }),
            (a, b, c) => {
                let errs = [a.err(), b.err(), c.err()];
                let mut errs: Vec<PipelineError> = errs.into_iter().flatten().collect();
                let root = errs.iter().position(|e| !matches!(e, PipelineError::Disconnected)).unwrap_or(0);
                Err(errs.swap_remove(root))
            }
        }
    })
}

#[derive(Clone, Copy)]
enum Payload {
    Imu(usize),
    Scan(usize),
    Gnss(usize),
}

fn sync_stage<'a>(
    cfg: &RunConfig,
    rig: &Rig,
    streams: &'a SensorStreams,
    mask: &SensorMask,
    tx: SyncSender<Event<'a>>,
) -> Result<SyncStageCounters, PipelineError> {
    let mut merged: Vec<(Timestamp, SensorId, Payload)> = Vec::new();
    for m in mask.imu_mounts() {
        for (i, s) in streams.imu.get(&m).into_iter().flatten().enumerate() {
            merged.push((s.stamp, SensorId::Imu(m), Payload::Imu(i)));
        }
    }
    for m in mask.lidar_mounts() {
        for (i, s) in streams.lidar.get(&m).into_iter().flatten().enumerate() {
            merged.push((s.start, SensorId::Lidar(m), Payload::Scan(i)));
        }
    }
    for (i, f) in streams.gnss.iter().enumerate() {
        merged.push((f.stamp, SensorId::Gnss, Payload::Gnss(i)));
    }
    merged.sort_by_key(|(t, id, _)| (*t, *id));

    let mut counters = SyncStageCounters::default();
    let mut queues = QueueSet::new(cfg.sync.clone(), &mask.sensors())?;
    let mut fuser = ImuFuser::new(rig, cfg.pipeline.fusion);
    let mut emit = |g: SyncGroup<Payload>, counters: &mut SyncStageCounters| -> Result<(), PipelineError> {
        match g.modality {
            Modality::Imu => {
                counters.imu_groups += 1;
                if g.members.len() < mask.imus {
                    counters.imu_partial_groups += 1;
                }
                let samples: Vec<(Mount, ImuSample)> = g
                    .members
                    .iter()
                    .filter_map(|m| match (m.sensor, m.payload) {
                        (SensorId::Imu(mount), Payload::Imu(i)) => Some((mount, streams.imu[&mount][i])),
                        _ => None,
                    })
                    .collect();
                let (fused, implausible) = fuser.fuse(g.anchor, &samples)?;
                counters.implausible_imu += implausible;
                match fused {
                    Some(f) => send(&tx, Event::Imu(f)),
                    None => Ok(()),
                }
            }
            Modality::Lidar => {
                counters.lidar_groups += 1;
                if g.members.len() < mask.lidars {
                    counters.lidar_partial_groups += 1;
                }
                let scans = g
                    .members
                    .iter()
                    .filter_map(|m| match (m.sensor, m.payload) {
                        (SensorId::Lidar(mount), Payload::Scan(i)) => Some(&streams.lidar[&mount][i]),
                        _ => None,
                    })
                    .collect();
                send(&tx, Event::Scans(g.anchor, scans))
            }
            Modality::Gnss => {
                for m in &g.members {
                    if let Payload::Gnss(i) = m.payload {
                        counters.gnss_fixes += 1;
                        send(&tx, Event::Gnss(streams.gnss[i]))?;
                    }
                }
                Ok(())
            }
        }
    };

    for (stamp, id, payload) in merged {
        *counters.consumed.entry(id.to_string()).or_default() += 1;
        match queues.push(StampedSignal::new(stamp, id, payload)) {
            Ok(()) | Err(SyncError::LateArrival { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        while let Some(g) = queues.associate() {
            emit(g, &mut counters)?;
        }
    }
    queues.close();
    while let Some(g) = queues.associate() {
        emit(g, &mut counters)?;
    }
    let SyncCounters { pushed, late, capacity_drops, .. } = queues.counters();
    counters.pushed = pushed;
    counters.late = late;
    counters.capacity_drops = capacity_drops;
    Ok(counters)
}

/// Fuses one synchronized group of IMU samples, caching the arrays of the
/// channel subsets seen so far.
struct ImuFuser<'a> {
    rig: &'a Rig,
    method: FusionMethod,
    arrays: HashMap<Vec<Mount>, MimuArray>,
}

impl<'a> ImuFuser<'a> {
    fn new(rig: &'a Rig, method: FusionMethod) -> Self {
        Self { rig, method, arrays: HashMap::new() }
    }

    /// Fused sample (if any plausible member remains) and the number of
    /// implausible members left out.
    fn fuse(&mut self, anchor: Timestamp, members: &[(Mount, ImuSample)]) -> Result<(Option<FusedImuSample>, u64), PipelineError> {
        let samples: Vec<(Mount, ImuSample)> = members.iter().filter(|(_, s)| s.is_plausible()).copied().collect();
        let implausible = (members.len() - samples.len()) as u64;
        if samples.is_empty() {
            return Ok((None, implausible));
        }
        let mounts: Vec<Mount> = samples.iter().map(|(m, _)| *m).collect();
        if !self.arrays.contains_key(&mounts) {
            for m in &mounts {
                self.rig.imu(*m).ok_or(PipelineError::MissingCalibration(SensorId::Imu(*m)))?;
            }
            self.arrays.insert(mounts.clone(), self.rig.mimu(&mounts)?);
        }
        let arr = &self.arrays[&mounts];
        let ordered: Vec<ImuSample> = arr
            .channels()
            .iter()
            .map(|c| samples.iter().find(|(m, _)| *m == c.mount).map(|(_, s)| *s).expect("channel present"))
            .collect();
        let fused = match self.method {
            FusionMethod::Mle => fuse_mle_samples(arr, anchor, &ordered)?,
            FusionMethod::Average => fuse_average_samples(arr, anchor, &ordered)?,
        };
        Ok((Some(fused), implausible))
    }
}

/// Synchronizes per-channel IMU streams and fuses every group.
pub fn fuse_imu_streams(
    rig: &Rig,
    imu: &BTreeMap<Mount, Vec<ImuSample>>,
    method: FusionMethod,
    sync: &crate::sync::SyncConfig,
) -> Result<Vec<FusedImuSample>, PipelineError> {
    let sensors: Vec<SensorId> = imu.keys().map(|m| SensorId::Imu(*m)).collect();
    let mut merged: Vec<(Timestamp, Mount, usize)> =
        imu.iter().flat_map(|(m, v)| v.iter().enumerate().map(move |(i, s)| (s.stamp, *m, i))).collect();
    merged.sort_by_key(|(t, m, _)| (*t, *m));
    let mut queues = QueueSet::new(sync.clone(), &sensors)?;
    let mut fuser = ImuFuser::new(rig, method);
    let mut out = Vec::new();
    let mut drain = |queues: &mut QueueSet<usize>, out: &mut Vec<FusedImuSample>| -> Result<(), PipelineError> {
        while let Some(g) = queues.associate() {
            let members: Vec<(Mount, ImuSample)> = g
                .members
                .iter()
                .filter_map(|s| s.sensor.mount().map(|m| (m, imu[&m][s.payload])))
                .collect();
            if let (Some(f), _) = fuser.fuse(g.anchor, &members)? {
                out.push(f);
            }
        }
        Ok(())
    };
    for (t, m, i) in merged {
        match queues.push(StampedSignal::new(t, SensorId::Imu(m), i)) {
            Ok(()) | Err(SyncError::LateArrival { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        drain(&mut queues, &mut out)?;
    }
    queues.close();
    drain(&mut queues, &mut out)?;
    Ok(out)
}

/// Preintegrates the zero-order-hold inertial signal over `[a, b)`.
fn integrate(imu: &[FusedImuSample], a: Timestamp, b: Timestamp, state: &NavState, cfg: &RunConfig) -> Result<PreintegratedDelta, PipelineError> {
    let mut delta = PreintegratedDelta::at_state(state, cfg.imu_noise);
    let first = imu.partition_point(|s| s.stamp <= a).saturating_sub(1);
    for (i, s) in imu.iter().enumerate().skip(first) {
        if s.stamp >= b {
            break;
        }
        let lo = s.stamp.max(a);
        let hi = imu.get(i + 1).map_or(b, |n| n.stamp.min(b));
        if hi > lo {
            delta.integrate(s, hi.secs_since(lo))?;
        }
    }
    Ok(delta)
}

struct Keyframe {
    stamp: Timestamp,
    state: NavState,
    odom: Pose,
    registered: bool,
}

struct Odometry<'a> {
    cfg: &'a RunConfig,
    rig: &'a Rig,
    extrinsics: BTreeMap<Mount, Pose>,
    gravity: Vector3<f64>,
    gnss_enabled: bool,
    imu: Vec<FusedImuSample>,
    gnss: Vec<GnssFix>,
    pending: VecDeque<(Timestamp, Vec<&'a LidarScan>)>,
    map: LocalSubmap,
    rng: ChaCha8Rng,
    kf: Option<Keyframe>,
    init: Option<GravityInit>,
    counters: OdometryCounters,
}

impl<'a> Odometry<'a> {
    fn predict_to(&self, kf: &Keyframe, t: Timestamp) -> Result<(PreintegratedDelta, NavState), PipelineError> {
        let delta = integrate(&self.imu, kf.stamp, t, &kf.state, self.cfg)?;
        let x = predict(&kf.state, &delta, &self.gravity);
        Ok((delta, x))
    }

    /// Base-frame cloud at `anchor` from deskewed scans.
    fn cloud(&self, scans: &[&LidarScan], base_at: impl Fn(Timestamp) -> Result<Pose, PipelineError>) -> Result<Vec<Vector3<f64>>, PipelineError> {
        let anchor = scans.iter().map(|s| s.start).min().expect("non-empty group");
        let base_anchor_inv = base_at(anchor)?.inverse();
        let mut out = Vec::new();
        for scan in scans {
            let mount = self.extrinsics[&scan.sensor];
            let start = base_at(scan.start)?;
            let pose_i = start.compose(&mount);
            let pose_j = base_at(scan.end)?.compose(&mount);
            let straight = match deskew(scan, &pose_i, &pose_j) {
                Ok(s) => s,
                Err(DeskewError::DegenerateInterval { passthrough }) => passthrough,
                Err(DeskewError::Geometry(e)) => return Err(PipelineError::Estimator(e.to_string())),
            };
            let to_anchor = base_anchor_inv.compose(&start).compose(&mount);
            out.extend(straight.points.iter().map(|p| to_anchor.transform_point(&p.p)));
        }
        Ok(voxel_downsample(&out, self.cfg.pipeline.voxel))
    }

    fn try_init(&mut self, yaw: f64, tx: &SyncSender<GraphMsg>, rx: &Receiver<NavState>) -> Result<(), PipelineError> {
        let (Some(first), Some(last)) = (self.imu.first(), self.imu.last()) else { return Ok(()) };
        let n = self.imu.len();
        if n < 2 {
            return Ok(());
        }
        let span = last.stamp.secs_since(first.stamp);
        if span + span / ((n - 1) as f64) < self.cfg.align.t_static - 1e-9 {
            return Ok(());
        }
        let fixes: Vec<GnssFix> = self.gnss.iter().filter(|f| f.stamp <= last.stamp).copied().collect();
        let init = gravity_align(&self.imu, &fixes, yaw, &self.cfg.align)?;
        let mut state = init.state();
        state.pose.translation -= state.pose.rotation * self.rig.gnss_lever;
        info!(
            "initialized at {}: roll {:.4} pitch {:.4} yaw {:.4} rad, position {:?}",
            init.stamp,
            init.roll,
            init.pitch,
            init.yaw,
            state.pose.translation.as_slice()
        );
        send(tx, GraphMsg::Init { stamp: init.stamp, state })?;
        let state = rx.recv().map_err(|_| PipelineError::Disconnected)?;

        // Seed the map with the latest group seen while standing still.
        let seed_at = self.pending.iter().rposition(|(anchor, _)| *anchor <= init.stamp);
        let mut registered = false;
        if let Some(k) = seed_at {
            let (_, scans) = self.pending[k].clone();
            let cloud = self.cloud(&scans, |_| Ok(state.pose))?;
            let world: Vec<Vector3<f64>> = cloud.iter().map(|p| state.pose.transform_point(p)).collect();
            map_update(&mut self.map, &world, &state.pose);
            self.counters.scans_used += scans.len() as u64;
            registered = true;
            for (_, s) in self.pending.drain(..k) {
                self.counters.scans_skipped += s.len() as u64;
            }
            self.pending.pop_front();
        }
        self.kf = Some(Keyframe { stamp: init.stamp, state, odom: state.pose, registered });
        self.init = Some(init);
        Ok(())
    }

    fn process_pending(&mut self, finished: bool, tx: &SyncSender<GraphMsg>, rx: &Receiver<NavState>) -> Result<(), PipelineError> {
        while let Some((anchor, scans)) = self.pending.front().cloned() {
            let Some(kf) = &self.kf else { return Ok(()) };
            let end = scans.iter().map(|s| s.end).max().expect("non-empty group");
            let covered = self.imu.last().is_some_and(|s| s.stamp >= end);
            if !covered {
                if finished {
                    for (_, s) in self.pending.drain(..) {
                        self.counters.scans_dropped += s.len() as u64;
                    }
                }
                return Ok(());
            }
            self.pending.pop_front();
            if anchor.secs_since(kf.stamp) < self.cfg.pipeline.keyframe_interval - 1e-6 {
                self.counters.scans_skipped += scans.len() as u64;
                continue;
            }
            self.keyframe(anchor, &scans, tx, rx)?;
        }
        Ok(())
    }

    fn keyframe(&mut self, anchor: Timestamp, scans: &[&LidarScan], tx: &SyncSender<GraphMsg>, rx: &Receiver<NavState>) -> Result<(), PipelineError> {
        let kf = self.kf.take().expect("initialized");
        let (delta, pred) = self.predict_to(&kf, anchor)?;
        let cloud = self.cloud(scans, |t| Ok(self.predict_to(&kf, t)?.1.pose))?;
        let sparse = subsample(&cloud, self.cfg.pipeline.icp_max_points, &mut self.rng);
        let prior = kf.odom.compose(&kf.state.pose.between(&pred.pose));

        self.counters.keyframes += 1;
        self.counters.scans_used += scans.len() as u64;
        let (odom, registered, degenerate) = match icp_register(&sparse, &self.map, &prior, anchor, &self.cfg.icp) {
            Ok(est) => {
                self.counters.icp_runs += 1;
                self.counters.icp_iterations += est.iterations as u64;
                if est.degenerate {
                    self.counters.icp_degenerate += 1;
                }
                (est.pose, true, est.degenerate)
            }
            Err(IcpError::EmptyMap) => (prior, false, false),
            Err(IcpError::InsufficientOverlap { found, estimate }) => {
                self.counters.icp_runs += 1;
                self.counters.icp_iterations += estimate.iterations as u64;
                self.counters.icp_failures += 1;
                warn!("registration at {anchor} failed with {found} correspondences");
                (prior, false, false)
            }
        };
        let world: Vec<Vector3<f64>> = cloud.iter().map(|p| odom.transform_point(p)).collect();
        map_update(&mut self.map, &world, &odom);

        let mut guess = pred;
        if registered {
            guess.pose = kf.state.pose.compose(&kf.odom.between(&odom));
        }
        let gyro = self.imu[self.imu.partition_point(|s| s.stamp <= anchor).saturating_sub(1)].gyro;
        let gnss = if self.gnss_enabled { self.gnss_near(&kf, anchor, &pred)? } else { None };
        let msg = KeyframeMsg {
            stamp: anchor,
            guess,
            delta,
            gyro,
            odom: (registered && kf.registered).then_some((kf.odom, odom, degenerate)),
            gnss,
        };
        send(tx, GraphMsg::Keyframe(Box::new(msg)))?;
        let state = rx.recv().map_err(|_| PipelineError::Disconnected)?;
        debug!("keyframe {anchor}: position {:?}", state.pose.translation.as_slice());
        self.kf = Some(Keyframe { stamp: anchor, state, odom, registered });
        Ok(())
    }

    /// Fix nearest to `t`, moved along the predicted antenna path to `t`.
    fn gnss_near(&self, kf: &Keyframe, t: Timestamp, at_t: &NavState) -> Result<Option<GnssFix>, PipelineError> {
        let max_off = crate::geometry::secs_to_nanos(self.cfg.pipeline.gnss_max_offset);
        let Some(fix) = self
            .gnss
            .iter()
            .filter(|f| (f.stamp - t).abs() <= max_off && f.stamp >= kf.stamp)
            .min_by_key(|f| ((f.stamp - t).abs(), f.stamp))
        else {
            return Ok(None);
        };
        let lever = self.rig.gnss_lever;
        let at_fix = self.predict_to(kf, fix.stamp)?.1.pose;
        let shift = at_t.pose.transform_point(&lever) - at_fix.transform_point(&lever);
        let floor = self.cfg.pipeline.gnss_min_var;
        let mut cov = fix.cov;
        for i in 0..3 {
            cov[(i, i)] = cov[(i, i)].max(floor);
        }
        Ok(Some(GnssFix { stamp: t, position: fix.position + shift, cov }))
    }
}

type OdometryResult = (Vec<FusedImuSample>, GravityInit, OdometryCounters);

fn odometry_stage(
    cfg: &RunConfig,
    rig: &Rig,
    yaw: f64,
    rx: Receiver<Event<'_>>,
    tx: SyncSender<GraphMsg>,
    snap: Receiver<NavState>,
) -> Result<OdometryResult, PipelineError> {
    let mask = cfg.mask()?;
    let mut o = Odometry {
        cfg,
        rig,
        extrinsics: rig.lidar_extrinsics(),
        gravity: gravity_vector(cfg.align.gravity),
        gnss_enabled: mask.gnss,
        imu: Vec::new(),
        gnss: Vec::new(),
        pending: VecDeque::new(),
        map: LocalSubmap::new(cfg.submap),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        kf: None,
        init: None,
        counters: OdometryCounters::default(),
    };
    for ev in rx.iter() {
        match ev {
            Event::Imu(s) => {
                if let Some(last) = o.imu.last() {
                    if s.stamp.secs_since(last.stamp) > cfg.pipeline.max_imu_gap {
                        return Err(PipelineError::ImuGap { from: last.stamp, to: s.stamp });
                    }
                }
                o.imu.push(s);
                if o.kf.is_none() {
                    o.try_init(yaw, &tx, &snap)?;
                }
            }
            Event::Scans(anchor, scans) => o.pending.push_back((anchor, scans)),
            Event::Gnss(f) => o.gnss.push(f),
        }
        o.process_pending(false, &tx, &snap)?;
    }
    o.process_pending(true, &tx, &snap)?;
    let init = o.init.ok_or(PipelineError::NoData("static window for initialization"))?;
    Ok((o.imu, init, o.counters))
}

type GraphResult = (Vec<(Timestamp, Pose)>, GraphCounters);

fn graph_stage(
    cfg: &RunConfig,
    rig: &Rig,
    mask: &SensorMask,
    rx: Receiver<GraphMsg>,
    tx: SyncSender<NavState>,
) -> Result<GraphResult, PipelineError> {
    let gc = &cfg.graph;
    let gravity = gravity_vector(cfg.align.gravity);
    let mut graph = FactorGraph::new();
    let mut counters = GraphCounters::default();
    let mut trajectory = Vec::new();
    let mut next_id = 0u64;
    let invalid = |what: &str| PipelineError::Estimator(format!("{what} factor has an invalid covariance"));

    for msg in rx.iter() {
        let id = next_id;
        next_id += 1;
        match msg {
            GraphMsg::Init { stamp, state } => {
                graph.add_node(id, stamp, state)?;
                let prior = Factor::prior(id, state.pose, state.acc_bias, state.gyro_bias, &gc.prior_cov()).ok_or_else(|| invalid("prior"))?;
                graph.add_factor(prior)?;
            }
            GraphMsg::Keyframe(kf) => {
                let kf = *kf;
                let prev = graph.latest().ok_or(PipelineError::Disconnected)?;
                graph.add_node(id, kf.stamp, kf.guess)?;
                graph.add_factor(Factor::imu(prev, id, kf.delta, gravity).ok_or_else(|| invalid("IMU"))?)?;
                graph.add_factor(Factor::rate(id, kf.gyro, &gc.rate_cov()).ok_or_else(|| invalid("rate"))?)?;
                if let Some((odom_i, odom_j, degenerate)) = kf.odom {
                    let scale = if degenerate { cfg.pipeline.degenerate_inflation } else { 1.0 };
                    let cov = gc.between_cov() * scale;
                    graph.add_factor(Factor::between(prev, id, odom_i, odom_j, &cov).ok_or_else(|| invalid("between"))?)?;
                    counters.between_factors += 1;
                }
                match kf.gnss {
                    Some(fix) => {
                        let est = graph.position_covariance(id).unwrap_or_else(|| Matrix3::identity() * f64::INFINITY);
                        if maybe_add_gnss(&mut graph, id, &est, &fix, &rig.gnss_lever)? {
                            counters.gnss_in += 1;
                        } else {
                            counters.gnss_out += 1;
                        }
                    }
                    None if !mask.gnss => counters.gnss_masked += 1,
                    None => {}
                }
            }
        }
        counters.nodes += 1;
        let report = graph.optimize(gc.max_iterations, gc.lambda_init)?;
        counters.optimizations += 1;
        counters.lm_iterations += report.iterations as u64;
        let state = *graph.state(id).expect("node just added");
        if !report.final_cost.is_finite() || !state.is_finite() {
            return Err(PipelineError::Estimator(format!("cost diverged at node {id} ({})", report.final_cost)));
        }
        let excess = graph.len().saturating_sub(gc.window);
        let leaving: Vec<(Timestamp, Pose)> = graph.nodes().take(excess).map(|(_, n)| (n.stamp, n.state.pose)).collect();
        counters.marginalized += graph.enforce_window(gc.window).len() as u64;
        trajectory.extend(leaving);
        send(&tx, state)?;
    }
    trajectory.extend(graph.nodes().map(|(_, n)| (n.stamp, n.state.pose)));
    Ok((trajectory, counters))
}
