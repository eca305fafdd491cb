use std::collections::{HashMap, HashSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

type Key = (i64, i64, i64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubmapConfig {
    /// Minimum spacing of stored points, meters.
    pub resolution: f64,
    /// Side of the sliding box kept around the vehicle, meters.
    pub box_side: f64,
    /// Edge of the hash cells used for neighbor search, meters.
    pub cell_size: f64,
}

impl Default for SubmapConfig {
    fn default() -> Self {
        Self { resolution: 0.05, box_side: 150.0, cell_size: 0.5 }
    }
}

/// Incremental point map with exact k-nearest-neighbor queries.
///
/// Points live in a spatial hash of `cell_size` cubes. A point is accepted
/// only if its `resolution` voxel is free and no stored point lies within
/// `resolution / 2`.
#[derive(Clone, Debug)]
pub struct LocalSubmap {
    cfg: SubmapConfig,
    cells: HashMap<Key, Vec<Vector3<f64>>>,
    voxels: HashSet<Key>,
    len: usize,
}

fn key(p: &Vector3<f64>, size: f64) -> Key {
    ((p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64)
}

impl LocalSubmap {
    pub fn new(cfg: SubmapConfig) -> Self {
        assert!(cfg.resolution > 0.0 && cfg.cell_size > 0.0 && cfg.box_side > 0.0);
        Self { cfg, cells: HashMap::new(), voxels: HashSet::new(), len: 0 }
    }

    pub fn config(&self) -> &SubmapConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn points(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.cells.values().flatten()
    }

    /// Inserts points subject to the spacing rule; returns how many were kept.
    pub fn insert(&mut self, points: &[Vector3<f64>]) -> usize {
        let min_sq = (self.cfg.resolution * 0.5).powi(2);
        let mut kept = 0;
        for p in points {
            if !p.iter().all(|x| x.is_finite()) {
                continue;
            }
            let vk = key(p, self.cfg.resolution);
            if self.voxels.contains(&vk) || self.any_within(p, min_sq) {
                continue;
            }
            self.voxels.insert(vk);
            self.cells.entry(key(p, self.cfg.cell_size)).or_default().push(*p);
            self.len += 1;
            kept += 1;
        }
        kept
    }

    fn any_within(&self, p: &Vector3<f64>, r_sq: f64) -> bool {
        let r = r_sq.sqrt();
        let lo = key(&(p - Vector3::repeat(r)), self.cfg.cell_size);
        let hi = key(&(p + Vector3::repeat(r)), self.cfg.cell_size);
        for x in lo.0..=hi.0 {
            for y in lo.1..=hi.1 {
                for z in lo.2..=hi.2 {
                    if let Some(c) = self.cells.get(&(x, y, z)) {
                        if c.iter().any(|q| (q - p).norm_squared() < r_sq) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Removes every point outside the axis-aligned box of side `box_side`
    /// centered at `center`.
    pub fn crop(&mut self, center: &Vector3<f64>) {
        let half = self.cfg.box_side * 0.5;
        let lo = center - Vector3::repeat(half);
        let hi = center + Vector3::repeat(half);
        let s = self.cfg.cell_size;
        let res = self.cfg.resolution;
        let inside = |p: &Vector3<f64>| (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i]);
        let voxels = &mut self.voxels;
        let mut removed = 0;
        self.cells.retain(|k, pts| {
            let c_lo = Vector3::new(k.0 as f64 * s, k.1 as f64 * s, k.2 as f64 * s);
            let c_hi = c_lo + Vector3::repeat(s);
            if inside(&c_lo) && inside(&c_hi) {
                return true;
            }
            pts.retain(|p| {
                let keep = inside(p);
                if !keep {
                    voxels.remove(&key(p, res));
                    removed += 1;
                }
                keep
            });
            !pts.is_empty()
        });
        self.len -= removed;
    }

    /// The `k` stored points nearest to `p`, closest first, with squared
    /// distances.
    pub fn knn(&self, p: &Vector3<f64>, k: usize) -> Vec<(f64, Vector3<f64>)> {
        self.search(p, k, f64::INFINITY)
    }

    /// Like [`knn`](Self::knn) but ignoring points farther than `max_dist`.
    pub fn knn_within(&self, p: &Vector3<f64>, k: usize, max_dist: f64) -> Vec<(f64, Vector3<f64>)> {
        self.search(p, k, max_dist)
    }

    fn search(&self, p: &Vector3<f64>, k: usize, max_dist: f64) -> Vec<(f64, Vector3<f64>)> {
        let mut best: Vec<(f64, Vector3<f64>)> = Vec::with_capacity(k + 1);
        if k == 0 || self.len == 0 {
            return best;
        }
        let max_sq = max_dist * max_dist;
        let offer = |best: &mut Vec<(f64, Vector3<f64>)>, q: &Vector3<f64>| {
            let d = (q - p).norm_squared();
            if d > max_sq || (best.len() == k && d >= best[k - 1].0) {
                return;
            }
            let at = best.partition_point(|(bd, _)| *bd <= d);
            best.insert(at, (d, *q));
            best.truncate(k);
        };

        let s = self.cfg.cell_size;
        let c = key(p, s);
        let max_ring = if max_dist.is_finite() { (max_dist / s).ceil() as i64 + 1 } else { i64::MAX };
        let mut r: i64 = 0;
        loop {
            let shell = if r == 0 { 1 } else { (2 * r + 1).pow(3) - (2 * r - 1).pow(3) };
            if shell as usize >= self.cells.len() {
                // Scanning every cell is cheaper than the remaining shells.
                best.clear();
                for pts in self.cells.values() {
                    for q in pts {
                        offer(&mut best, q);
                    }
                }
                return best;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    let edge = dx.abs() == r || dy.abs() == r;
                    let dzs: Vec<i64> = if edge { (-r..=r).collect() } else if r == 0 { vec![0] } else { vec![-r, r] };
                    for dz in dzs {
                        if let Some(pts) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                            for q in pts {
                                offer(&mut best, q);
                            }
                        }
                    }
                }
            }
            let reach = r as f64 * s;
            if (best.len() == k && best[k - 1].0 <= reach * reach) || r >= max_ring {
                return best;
            }
            r += 1;
        }
    }
}
