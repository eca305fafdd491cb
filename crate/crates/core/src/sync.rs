//! Per-sensor buffer queues and cross-sensor association under signal loss.
//!
//! Each sensor owns a bounded FIFO. [`QueueSet::associate`] pops the oldest
//! group of same-modality heads whose stamps lie within the modality
//! threshold of the oldest head. Unlike an approximate-time policy that waits
//! for every sensor, a group is emitted with whatever sensors are available
//! once every missing sensor has either moved past the window or the anchor
//! has aged beyond `max_age`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Timestamp;

/// Mounting position of a sensor housing on the vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mount {
    #[serde(rename = "F_L")]
    FrontLeft,
    #[serde(rename = "F_R")]
    FrontRight,
    #[serde(rename = "R_L")]
    RearLeft,
    #[serde(rename = "R_R")]
    RearRight,
}

impl Mount {
    pub const ALL: [Mount; 4] = [Mount::FrontLeft, Mount::FrontRight, Mount::RearLeft, Mount::RearRight];

    pub fn name(self) -> &'static str {
        match self {
            Mount::FrontLeft => "F_L",
            Mount::FrontRight => "F_R",
            Mount::RearLeft => "R_L",
            Mount::RearRight => "R_R",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Mount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mount {
    type Err = SyncError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mount::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SyncError::UnknownSensorName(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Lidar,
    Imu,
    Gnss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SensorId {
    Lidar(Mount),
    Imu(Mount),
    Gnss,
}

impl SensorId {
    pub fn modality(self) -> Modality {
        match self {
            SensorId::Lidar(_) => Modality::Lidar,
            SensorId::Imu(_) => Modality::Imu,
            SensorId::Gnss => Modality::Gnss,
        }
    }

    pub fn mount(self) -> Option<Mount> {
        match self {
            SensorId::Lidar(m) | SensorId::Imu(m) => Some(m),
            SensorId::Gnss => None,
        }
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SensorId::Lidar(m) => write!(f, "lidar:{m}"),
            SensorId::Imu(m) => write!(f, "imu:{m}"),
            SensorId::Gnss => f.write_str("gnss"),
        }
    }
}

impl FromStr for SensorId {
    type Err = SyncError;

    /// Parses `lidar:F_L`, `imu:R_R` or `gnss`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("lidar", m)) => Ok(SensorId::Lidar(m.parse()?)),
            Some(("imu", m)) => Ok(SensorId::Imu(m.parse()?)),
            None if s == "gnss" => Ok(SensorId::Gnss),
            _ => Err(SyncError::UnknownSensorName(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("sensor {0} is not registered with this queue set")]
    UnknownSensor(SensorId),
    #[error("unrecognized sensor name '{0}'")]
    UnknownSensorName(String),
    #[error("message at {stamp} arrived after group anchor {anchor} was emitted")]
    LateArrival { stamp: Timestamp, anchor: Timestamp },
    #[error("negative timestamp {0}")]
    NegativeStamp(Timestamp),
    #[error("invalid sync configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Clone, Debug)]
pub struct StampedSignal<P> {
    pub stamp: Timestamp,
    pub sensor: SensorId,
    pub payload: P,
}

impl<P> StampedSignal<P> {
    pub fn new(stamp: Timestamp, sensor: SensorId, payload: P) -> Self {
        Self { stamp, sensor, payload }
    }
}

/// Messages from different sensors judged to describe the same instant.
#[derive(Clone, Debug)]
pub struct SyncGroup<P> {
    pub anchor: Timestamp,
    pub modality: Modality,
    pub members: Vec<StampedSignal<P>>,
}

impl<P> SyncGroup<P> {
    pub fn sensors(&self) -> Vec<SensorId> {
        self.members.iter().map(|m| m.sensor).collect()
    }

    pub fn mounts(&self) -> Vec<Mount> {
        self.members.iter().filter_map(|m| m.sensor.mount()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncConfig {
    pub lidar_threshold_ns: i64,
    pub imu_threshold_ns: i64,
    pub lidar_max_age_ns: i64,
    pub imu_max_age_ns: i64,
    pub gnss_max_age_ns: i64,
    pub queue_capacity: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            lidar_threshold_ns: 10_000_000,
            imu_threshold_ns: 1_000_000,
            lidar_max_age_ns: 300_000_000,
            imu_max_age_ns: 100_000_000,
            gnss_max_age_ns: 1_000_000_000,
            queue_capacity: 1000,
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<(), SyncError> {
        if self.lidar_threshold_ns <= 0 || self.imu_threshold_ns <= 0 {
            return Err(SyncError::InvalidConfig("thresholds must be positive"));
        }
        if self.lidar_max_age_ns <= self.lidar_threshold_ns || self.imu_max_age_ns <= self.imu_threshold_ns {
            return Err(SyncError::InvalidConfig("max_age must exceed the association threshold"));
        }
        if self.queue_capacity == 0 {
            return Err(SyncError::InvalidConfig("queue capacity must be at least 1"));
        }
        Ok(())
    }

    pub fn threshold(&self, m: Modality) -> i64 {
        match m {
            Modality::Lidar => self.lidar_threshold_ns,
            Modality::Imu => self.imu_threshold_ns,
            Modality::Gnss => 0,
        }
    }

    pub fn max_age(&self, m: Modality) -> i64 {
        match m {
            Modality::Lidar => self.lidar_max_age_ns,
            Modality::Imu => self.imu_max_age_ns,
            Modality::Gnss => self.gnss_max_age_ns,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SyncCounters {
    pub pushed: u64,
    pub late: u64,
    pub capacity_drops: u64,
    pub evicted: u64,
    pub groups: u64,
    pub partial_groups: u64,
}

struct SensorQueue<P> {
    items: VecDeque<StampedSignal<P>>,
    last_pushed: Option<Timestamp>,
}

/// Buffer queues for a fixed set of registered sensors.
pub struct QueueSet<P> {
    cfg: SyncConfig,
    queues: BTreeMap<SensorId, SensorQueue<P>>,
    latest: Option<Timestamp>,
    last_anchor: Option<Timestamp>,
    closed: bool,
    counters: SyncCounters,
}

impl<P> QueueSet<P> {
    pub fn new(cfg: SyncConfig, sensors: &[SensorId]) -> Result<Self, SyncError> {
        cfg.validate()?;
        let queues = sensors
            .iter()
            .map(|&s| (s, SensorQueue { items: VecDeque::new(), last_pushed: None }))
            .collect();
        Ok(Self { cfg, queues, latest: None, last_anchor: None, closed: false, counters: SyncCounters::default() })
    }

    pub fn config(&self) -> &SyncConfig {
        &self.cfg
    }

    pub fn counters(&self) -> SyncCounters {
        self.counters
    }

    pub fn len(&self, sensor: SensorId) -> usize {
        self.queues.get(&sensor).map_or(0, |q| q.items.len())
    }

    pub fn total_len(&self) -> usize {
        self.queues.values().map(|q| q.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn sensors(&self) -> impl Iterator<Item = SensorId> + '_ {
        self.queues.keys().copied()
    }

    /// Stamps currently buffered for `sensor`, oldest first.
    pub fn stamps(&self, sensor: SensorId) -> Vec<Timestamp> {
        self.queues.get(&sensor).map_or_else(Vec::new, |q| q.items.iter().map(|s| s.stamp).collect())
    }

    /// Appends a message to its sensor's FIFO. A full queue drops its oldest
    /// entry. Messages stamped before the last emitted anchor are discarded
    /// and reported as late.
    pub fn push(&mut self, s: StampedSignal<P>) -> Result<(), SyncError> {
        if s.stamp.nanos() < 0 {
            return Err(SyncError::NegativeStamp(s.stamp));
        }
        if let Some(anchor) = self.last_anchor {
            if s.stamp < anchor {
                self.counters.late += 1;
                return Err(SyncError::LateArrival { stamp: s.stamp, anchor });
            }
        }
        let capacity = self.cfg.queue_capacity;
        let q = self.queues.get_mut(&s.sensor).ok_or(SyncError::UnknownSensor(s.sensor))?;
        if q.items.len() >= capacity {
            q.items.pop_front();
            self.counters.capacity_drops += 1;
        }
        q.last_pushed = Some(q.last_pushed.map_or(s.stamp, |t| t.max(s.stamp)));
        self.latest = Some(self.latest.map_or(s.stamp, |t| t.max(s.stamp)));
        q.items.push_back(s);
        self.counters.pushed += 1;
        Ok(())
    }

    /// Marks the end of input: pending groups no longer wait for absent sensors.
    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Pops the oldest group, or `None` when the oldest candidate is still
    /// waiting on a sensor that may yet report.
    pub fn associate(&mut self) -> Option<SyncGroup<P>> {
        // Oldest head; ties broken by sensor enumeration order (BTreeMap order).
        let (anchor_sensor, anchor) = self
            .queues
            .iter()
            .filter_map(|(id, q)| q.items.front().map(|h| (*id, h.stamp)))
            .min_by_key(|&(id, stamp)| (stamp, id))?;
        let modality = anchor_sensor.modality();
        let window_end = anchor.offset(self.cfg.threshold(modality));

        let mut members = Vec::new();
        let mut unresolved = false;
        for (id, q) in self.queues.iter().filter(|(id, _)| id.modality() == modality) {
            match q.items.front() {
                Some(h) if h.stamp <= window_end => members.push(*id),
                Some(_) => {}
                None => {
                    if q.last_pushed.is_none_or(|t| t <= window_end) {
                        unresolved = true;
                    }
                }
            }
        }
        let aged = self.latest.is_some_and(|now| now - anchor > self.cfg.max_age(modality));
        if unresolved && !aged && !self.closed {
            return None;
        }

        let total = self.queues.keys().filter(|id| id.modality() == modality).count();
        let members: Vec<_> = members
            .into_iter()
            .map(|id| self.queues.get_mut(&id).and_then(|q| q.items.pop_front()).expect("head present"))
            .collect();
        self.counters.groups += 1;
        if members.len() < total {
            self.counters.partial_groups += 1;
        }
        self.last_anchor = Some(anchor);
        Some(SyncGroup { anchor, modality, members })
    }

    /// Removes every buffered message older than its modality's `max_age`
    /// relative to `now`, keeping FIFO order among survivors.
    pub fn evict_aged(&mut self, now: Timestamp) -> usize {
        let mut count = 0;
        for (id, q) in self.queues.iter_mut() {
            let max_age = self.cfg.max_age(id.modality());
            let before = q.items.len();
            q.items.retain(|s| now - s.stamp <= max_age);
            count += before - q.items.len();
        }
        self.counters.evicted += count as u64;
        count
    }
}

/// Thread-safe handle for multiple producers and a single consumer.
pub struct SharedQueueSet<P> {
    inner: Arc<Mutex<QueueSet<P>>>,
}

impl<P> Clone for SharedQueueSet<P> {
    fn clone(&self) -> Self {
        Self { inner: Arc::clone(&self.inner) }
    }
}

impl<P> SharedQueueSet<P> {
    pub fn new(set: QueueSet<P>) -> Self {
        Self { inner: Arc::new(Mutex::new(set)) }
    }

    pub fn push(&self, s: StampedSignal<P>) -> Result<(), SyncError> {
        self.inner.lock().expect("sync queue poisoned").push(s)
    }

    pub fn associate(&self) -> Option<SyncGroup<P>> {
        self.inner.lock().expect("sync queue poisoned").associate()
    }

    pub fn evict_aged(&self, now: Timestamp) -> usize {
        self.inner.lock().expect("sync queue poisoned").evict_aged(now)
    }

    pub fn close(&self) {
        self.inner.lock().expect("sync queue poisoned").close()
    }

    pub fn counters(&self) -> SyncCounters {
        self.inner.lock().expect("sync queue poisoned").counters()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LIDARS: [SensorId; 4] = [
        SensorId::Lidar(Mount::FrontLeft),
        SensorId::Lidar(Mount::FrontRight),
        SensorId::Lidar(Mount::RearLeft),
        SensorId::Lidar(Mount::RearRight),
    ];

    fn ms(v: f64) -> Timestamp {
        Timestamp::from_nanos((v * 1e6).round() as i64)
    }

    fn sig(stamp: Timestamp, sensor: SensorId) -> StampedSignal<u32> {
        StampedSignal::new(stamp, sensor, 0)
    }

    fn imu(m: Mount) -> SensorId {
        SensorId::Imu(m)
    }

    #[test]
    fn push_goes_to_own_queue() {
        let sensors: Vec<_> = Mount::ALL.iter().map(|&m| imu(m)).collect();
        let mut qs = QueueSet::new(SyncConfig::default(), &sensors).unwrap();
        for i in 0..3 {
            qs.push(sig(ms(10.0 * i as f64), imu(Mount::FrontLeft))).unwrap();
        }
        assert_eq!(qs.len(imu(Mount::FrontLeft)), 3);
        assert_eq!(qs.len(imu(Mount::FrontRight)), 0);
        assert_eq!(qs.total_len(), 3);
    }

    #[test]
    fn late_push_is_discarded_and_counted() {
        let mut qs = QueueSet::new(SyncConfig::default(), &[imu(Mount::FrontLeft)]).unwrap();
        qs.push(sig(ms(100.0), imu(Mount::FrontLeft))).unwrap();
        assert!(qs.associate().is_some());
        let err = qs.push(sig(ms(50.0), imu(Mount::FrontLeft))).unwrap_err();
        assert!(matches!(err, SyncError::LateArrival { .. }));
        assert_eq!(qs.counters().late, 1);
        assert_eq!(qs.len(imu(Mount::FrontLeft)), 0);
    }

    #[test]
    fn bounded_queue_drops_oldest() {
        let cfg = SyncConfig { queue_capacity: 4, ..SyncConfig::default() };
        let mut qs = QueueSet::new(cfg, &[imu(Mount::FrontLeft)]).unwrap();
        for i in 0..7 {
            qs.push(sig(ms(i as f64), imu(Mount::FrontLeft))).unwrap();
        }
        assert_eq!(qs.len(imu(Mount::FrontLeft)), 4);
        assert_eq!(qs.stamps(imu(Mount::FrontLeft))[0], ms(3.0));
        assert_eq!(qs.counters().capacity_drops, 3);
    }

    #[test]
    fn unknown_sensor_rejected() {
        let mut qs = QueueSet::new(SyncConfig::default(), &[imu(Mount::FrontLeft)]).unwrap();
        assert_eq!(
            qs.push(sig(ms(1.0), SensorId::Gnss)).unwrap_err(),
            SyncError::UnknownSensor(SensorId::Gnss)
        );
    }

    #[test]
    fn four_lidars_within_threshold_form_one_group() {
        let mut qs = QueueSet::new(SyncConfig::default(), &LIDARS).unwrap();
        for (s, t) in LIDARS.iter().zip([100_000.0, 100_004.0, 100_007.0, 100_009.0]) {
            qs.push(sig(ms(t), *s)).unwrap();
        }
        let g = qs.associate().unwrap();
        assert_eq!(g.anchor, ms(100_000.0));
        assert_eq!(g.sensors(), LIDARS.to_vec());
        assert!(qs.is_empty());
        assert!(qs.associate().is_none());
    }

    #[test]
    fn heads_beyond_threshold_split_into_two_groups() {
        let sensors = &LIDARS[..2];
        let mut qs = QueueSet::new(SyncConfig::default(), sensors).unwrap();
        qs.push(sig(ms(100_000.0), sensors[0])).unwrap();
        qs.push(sig(ms(100_015.0), sensors[1])).unwrap();
        qs.close();
        let a = qs.associate().unwrap();
        let b = qs.associate().unwrap();
        assert_eq!(a.sensors(), vec![sensors[0]]);
        assert_eq!(b.sensors(), vec![sensors[1]]);
        assert!(a.anchor < b.anchor);
    }

    #[test]
    fn waits_for_absent_sensor_until_max_age() {
        let mut qs = QueueSet::new(SyncConfig::default(), &LIDARS).unwrap();
        qs.push(sig(ms(0.0), LIDARS[0])).unwrap();
        qs.push(sig(ms(3.0), LIDARS[3])).unwrap();
        // F_R and R_L have never reported: keep waiting.
        assert!(qs.associate().is_none());
        // Other traffic advances the clock past the lidar max age.
        qs.push(sig(ms(301.0), LIDARS[0])).unwrap();
        let g = qs.associate().unwrap();
        assert_eq!(g.sensors(), vec![LIDARS[0], LIDARS[3]]);
        assert_eq!(qs.counters().partial_groups, 1);
    }

    #[test]
    fn sensor_that_moved_past_does_not_block() {
        let mut qs = QueueSet::new(SyncConfig::default(), &LIDARS[..2]).unwrap();
        qs.push(sig(ms(0.0), LIDARS[0])).unwrap();
        qs.push(sig(ms(100.0), LIDARS[1])).unwrap();
        let g = qs.associate().unwrap();
        assert_eq!(g.sensors(), vec![LIDARS[0]]);
    }

    /// Scripted five-step lossy pattern: (stamp offsets in ms per sensor,
    /// `None` = signal lost) and the group each step must produce.
    #[test]
    fn lossy_signal_replay_reproduces_group_memberships() {
        let pattern: [[Option<f64>; 4]; 5] = [
            [Some(0.0), Some(2.0), Some(5.0), Some(8.0)],
            [Some(100.0), None, None, Some(106.0)],
            [Some(200.0), Some(203.0), Some(201.0), None],
            [None, Some(304.0), None, None],
            [Some(400.0), Some(401.0), Some(402.0), Some(403.0)],
        ];
        let expected: [&[usize]; 5] = [&[0, 1, 2, 3], &[0, 3], &[0, 1, 2], &[1], &[0, 1, 2, 3]];

        let mut qs = QueueSet::new(SyncConfig::default(), &LIDARS).unwrap();
        let mut groups = Vec::new();
        let mut pushed = 0;
        for row in pattern.iter() {
            for (k, stamp) in row.iter().enumerate() {
                if let Some(t) = stamp {
                    qs.push(sig(ms(1000.0 + t), LIDARS[k])).unwrap();
                    pushed += 1;
                }
                while let Some(g) = qs.associate() {
                    groups.push(g);
                }
            }
        }
        qs.close();
        while let Some(g) = qs.associate() {
            groups.push(g);
        }

        assert_eq!(groups.len(), 5);
        for (g, want) in groups.iter().zip(expected) {
            let want: Vec<_> = want.iter().map(|&k| LIDARS[k]).collect();
            assert_eq!(g.sensors(), want);
        }
        assert_eq!(groups[1].mounts(), vec![Mount::FrontLeft, Mount::RearRight]);
        assert!(groups.windows(2).all(|w| w[0].anchor <= w[1].anchor));
        let used: usize = groups.iter().map(|g| g.members.len()).sum();
        assert_eq!(used, pushed);
    }

    #[test]
    fn evict_aged_removes_only_old_entries() {
        let mut qs = QueueSet::new(SyncConfig { imu_max_age_ns: 1_000_000_000, ..SyncConfig::default() }, &[imu(Mount::FrontLeft)]).unwrap();
        assert_eq!(qs.evict_aged(ms(0.0)), 0);
        qs.push(sig(ms(0.0), imu(Mount::FrontLeft))).unwrap();
        assert_eq!(qs.evict_aged(ms(2000.0)), 1);
        assert_eq!(qs.len(imu(Mount::FrontLeft)), 0);
    }

    #[test]
    fn gnss_forms_singleton_groups() {
        let mut qs = QueueSet::new(SyncConfig::default(), &[SensorId::Gnss, imu(Mount::FrontLeft)]).unwrap();
        qs.push(sig(ms(5.0), SensorId::Gnss)).unwrap();
        let g = qs.associate().unwrap();
        assert_eq!(g.modality, Modality::Gnss);
        assert_eq!(g.sensors(), vec![SensorId::Gnss]);
    }

    #[test]
    fn sensor_names_round_trip() {
        for id in [SensorId::Gnss, SensorId::Lidar(Mount::RearLeft), SensorId::Imu(Mount::FrontRight)] {
            assert_eq!(id.to_string().parse::<SensorId>().unwrap(), id);
        }
        assert!("imu:X".parse::<SensorId>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SyncConfig::default().validate().is_ok());
        let bad = SyncConfig { imu_max_age_ns: 500_000, ..SyncConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn concurrent_producers() {
        let sensors: Vec<_> = Mount::ALL.iter().map(|&m| imu(m)).collect();
        let shared = SharedQueueSet::new(QueueSet::<u32>::new(SyncConfig::default(), &sensors).unwrap());
        let handles: Vec<_> = sensors
            .iter()
            .map(|&s| {
                let h = shared.clone();
                std::thread::spawn(move || {
                    for i in 0..50 {
                        h.push(sig(ms(10.0 * i as f64), s)).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        shared.close();
        let mut n = 0;
        while let Some(g) = shared.associate() {
            assert_eq!(g.members.len(), 4);
            n += 1;
        }
        assert_eq!(n, 50);
    }

    proptest! {
        #[test]
        fn evict_matches_filter_oracle(ages in proptest::collection::vec(0i64..3_000, 0..40), now_ms in 1_000i64..4_000) {
            let cfg = SyncConfig { imu_max_age_ns: 1_000_000_000, ..SyncConfig::default() };
            let mut stamps: Vec<i64> = ages.iter().map(|a| a * 1_000_000).collect();
            stamps.sort();
            let mut qs = QueueSet::new(cfg.clone(), &[imu(Mount::FrontLeft)]).unwrap();
            for &s in &stamps {
                qs.push(sig(Timestamp(s), imu(Mount::FrontLeft))).unwrap();
            }
            let now = Timestamp(now_ms * 1_000_000);
            let survivors: Vec<Timestamp> = stamps.iter().map(|&s| Timestamp(s)).filter(|&s| now - s <= cfg.imu_max_age_ns).collect();
            let removed = qs.evict_aged(now);
            prop_assert_eq!(removed, stamps.len() - survivors.len());
            prop_assert_eq!(qs.stamps(imu(Mount::FrontLeft)), survivors);
        }

        /// Random lossy streams: no message reused or lost, anchors monotone,
        /// members within threshold, memory bounded.
        #[test]
        fn association_invariants(drops in proptest::collection::vec(proptest::bool::weighted(0.3), 4 * 30), jitter in proptest::collection::vec(0i64..900_000, 4 * 30)) {
            let sensors: Vec<_> = Mount::ALL.iter().map(|&m| imu(m)).collect();
            let cfg = SyncConfig { queue_capacity: 16, ..SyncConfig::default() };
            let mut qs = QueueSet::new(cfg.clone(), &sensors).unwrap();
            let mut groups = Vec::new();
            let mut pushed = Vec::new();
            for step in 0..30 {
                for (k, &s) in sensors.iter().enumerate() {
                    let i = step * 4 + k;
                    if drops[i] {
                        continue;
                    }
                    let stamp = Timestamp(step as i64 * 10_000_000 + jitter[i]);
                    qs.push(StampedSignal::new(stamp, s, i as u32)).unwrap();
                    pushed.push(i as u32);
                    prop_assert!(qs.total_len() <= sensors.len() * cfg.queue_capacity);
                    while let Some(g) = qs.associate() {
                        groups.push(g);
                    }
                }
            }
            qs.close();
            while let Some(g) = qs.associate() {
                groups.push(g);
            }
            let mut seen: Vec<u32> = groups.iter().flat_map(|g| g.members.iter().map(|m| m.payload)).collect();
            seen.sort();
            pushed.sort();
            prop_assert_eq!(seen, pushed);
            for w in groups.windows(2) {
                prop_assert!(w[0].anchor <= w[1].anchor);
            }
            for g in &groups {
                prop_assert!(!g.members.is_empty());
                let mut ids = g.sensors();
                ids.dedup();
                prop_assert_eq!(ids.len(), g.members.len());
                for m in &g.members {
                    prop_assert!(m.stamp - g.anchor <= cfg.imu_threshold_ns && m.stamp >= g.anchor);
                }
            }
        }
    }
}
