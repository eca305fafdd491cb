//! Bundled scenarios.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Aabb, Plane, Scenario, Segment, SimError, World};
use crate::geometry::Pose;

pub const NAMES: [&str; 3] = ["urban-loop", "corridor", "structured"];

/// Height of the base origin above the ground, meters.
const BASE_HEIGHT: f64 = 0.5;

pub fn by_name(name: &str) -> Result<Scenario, SimError> {
    match name {
        "urban-loop" => Ok(urban_loop()),
        "corridor" => Ok(corridor()),
        "structured" => Ok(structured()),
        _ => Err(SimError::UnknownPreset(name.to_string())),
    }
}

fn ground() -> Plane {
    Plane { point: Vector3::zeros(), normal: Vector3::z() }
}

fn still(duration: f64) -> Segment {
    Segment::new(duration, Vector3::zeros(), Vector3::zeros())
}

fn drive(duration: f64, v: f64, yaw_rate: f64) -> Segment {
    Segment::new(duration, Vector3::new(0.0, 0.0, yaw_rate), Vector3::new(v, 0.0, 0.0))
}

/// Row of buildings beside the road segment `a → b`, on the side of `n`.
fn row(rng: &mut ChaCha8Rng, a: Vector2<f64>, b: Vector2<f64>, n: Vector2<f64>, out: &mut Vec<Aabb>) {
    let dir = (b - a).normalize();
    let len = (b - a).norm();
    let mut s = 0.0;
    while s < len {
        let along = rng.random_range(8.0..25.0f64).min(len - s);
        let setback = rng.random_range(7.0..11.0);
        let depth = rng.random_range(6.0..14.0);
        let height = rng.random_range(5.0..18.0);
        let c0 = a + dir * s + n * setback;
        let c1 = a + dir * (s + along) + n * (setback + depth);
        out.push(Aabb::new(
            Vector3::new(c0.x.min(c1.x), c0.y.min(c1.y), 0.0),
            Vector3::new(c0.x.max(c1.x), c0.y.max(c1.y), height),
        ));
        s += along + rng.random_range(3.0..8.0);
    }
}

/// Closed rectangular block of about 500 m with buildings on both sides,
/// driven counter-clockwise at 5 m/s after a 5 s standstill.
pub fn urban_loop() -> Scenario {
    let v = 5.0;
    let radius = 10.0;
    let (long, short) = (135.0, 85.0);
    let arc = drive(FRAC_PI_2 * radius / v, v, v / radius);
    let mut segments = vec![still(5.0)];
    for len in [long, short, long, short] {
        segments.push(drive(len / v, v, 0.0));
        segments.push(arc);
    }
    segments.push(drive(4.0, v, 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut boxes = Vec::new();
    let p = |x: f64, y: f64| Vector2::new(x, y);
    // Road centerlines, inner side first.
    let roads = [
        (p(0.0, 0.0), p(long, 0.0), p(0.0, 1.0)),
        (p(long + radius, radius), p(long + radius, radius + short), p(-1.0, 0.0)),
        (p(long, short + 2.0 * radius), p(0.0, short + 2.0 * radius), p(0.0, -1.0)),
        (p(-radius, short + radius), p(-radius, radius), p(1.0, 0.0)),
    ];
    for (a, b, inward) in roads {
        let d = (b - a).normalize();
        row(&mut rng, a + d * 20.0, b - d * 20.0, inward, &mut boxes);
        row(&mut rng, a - d * 25.0, b + d * 25.0, -inward, &mut boxes);
    }

    Scenario {
        name: "urban-loop".into(),
        seed: 1,
        smooth_ramp: 1.5,
        start_pose: Pose::from_translation(Vector3::new(0.0, 0.0, BASE_HEIGHT)),
        segments,
        world: World { planes: vec![ground()], boxes },
        ..Scenario::default()
    }
}

/// Straight drive between two long parallel walls; translation along the
/// corridor is unobservable from geometry alone.
pub fn corridor() -> Scenario {
    Scenario {
        name: "corridor".into(),
        seed: 2,
        smooth_ramp: 1.0,
        start_pose: Pose::from_translation(Vector3::new(0.0, 0.0, BASE_HEIGHT)),
        segments: vec![still(5.0), drive(20.0, 5.0, 0.0)],
        world: World {
            planes: vec![
                ground(),
                Plane { point: Vector3::new(0.0, 4.0, 0.0), normal: -Vector3::y() },
                Plane { point: Vector3::new(0.0, -4.0, 0.0), normal: Vector3::y() },
            ],
            boxes: vec![],
        },
        ..Scenario::default()
    }
}

/// Walled yard with scattered blocks of different sizes.
pub fn structured() -> Scenario {
    let mut boxes = vec![
        Aabb::new(Vector3::new(-30.0, -31.0, 0.0), Vector3::new(60.0, -30.0, 6.0)),
        Aabb::new(Vector3::new(-30.0, 30.0, 0.0), Vector3::new(60.0, 31.0, 6.0)),
        Aabb::new(Vector3::new(-31.0, -31.0, 0.0), Vector3::new(-30.0, 31.0, 6.0)),
        Aabb::new(Vector3::new(60.0, -31.0, 0.0), Vector3::new(61.0, 31.0, 6.0)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0xb10c);
    while boxes.len() < 24 {
        let c: Vector3<f64> = Vector3::new(rng.random_range(-25.0..55.0), rng.random_range(-25.0..25.0), 0.0);
        if c.y.abs() < 6.0 {
            continue;
        }
        let half = Vector3::new(rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), 0.0);
        let h = rng.random_range(1.0..5.0);
        boxes.push(Aabb::new(c - half, c + half + Vector3::new(0.0, 0.0, h)));
    }
    Scenario {
        name: "structured".into(),
        seed: 3,
        smooth_ramp: 1.0,
        start_pose: Pose::from_translation(Vector3::new(0.0, 0.0, BASE_HEIGHT)),
        segments: vec![still(5.0), drive(10.0, 4.0, 0.0)],
        world: World { planes: vec![ground()], boxes },
        ..Scenario::default()
    }
}
