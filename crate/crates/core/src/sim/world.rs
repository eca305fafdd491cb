use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Infinite plane through `point` with normal `normal`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    /// Distance from `p` to the box in the horizontal plane.
    pub fn planar_distance(&self, p: &Vector3<f64>) -> f64 {
        let dx = (self.min.x - p.x).max(p.x - self.max.x).max(0.0);
        let dy = (self.min.y - p.y).max(p.y - self.max.y).max(0.0);
        dx.hypot(dy)
    }

    /// Entry distance of the ray `o + t·d` (slab test), if it hits beyond `t_min`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (a, b) = ((self.min[i] - o[i]) * inv, (self.max[i] - o[i]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        if t0 >= t_min {
            Some(t0)
        } else if t1 >= t_min {
            // Origin inside the box: the exit face is seen.
            Some(t1)
        } else {
            None
        }
    }
}

/// Static scene made of planes and boxes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct World {
    #[serde(default)]
    pub planes: Vec<Plane>,
    #[serde(default)]
    pub boxes: Vec<Aabb>,
}

impl World {
    pub fn is_empty(&self) -> bool {
        self.planes.is_empty() && self.boxes.is_empty()
    }

    /// Indices of boxes within `radius` (horizontally) of `p`.
    pub fn boxes_near(&self, p: &Vector3<f64>, radius: f64) -> Vec<usize> {
        (0..self.boxes.len()).filter(|&i| self.boxes[i].planar_distance(p) <= radius).collect()
    }

    /// Range to the first surface hit along the unit direction `d`,
    /// considering only the listed boxes.
    pub fn raycast_subset(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64, t_max: f64, boxes: &[usize]) -> Option<f64> {
        let mut best = t_max;
        let mut hit = false;
        for pl in &self.planes {
            let den = pl.normal.dot(d);
            if den.abs() < 1e-12 {
                continue;
            }
            let t = pl.normal.dot(&(pl.point - o)) / den;
            if t >= t_min && t < best {
                best = t;
                hit = true;
            }
        }
        for &i in boxes {
            if let Some(t) = self.boxes[i].intersect(o, d, t_min) {
                if t < best {
                    best = t;
                    hit = true;
                }
            }
        }
        hit.then_some(best)
    }

    pub fn raycast(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<f64> {
        let all: Vec<usize> = (0..self.boxes.len()).collect();
        self.raycast_subset(o, d, t_min, t_max, &all)
    }
}
