//! Synthetic data with known motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::projection::Point;
use crate::tensor::{Shape, Tensor};

/// A pair of normalized range images `(I1, I2)` with `I2(x) = I1(x - shift)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftPair {
    pub frame1: Tensor<f32>,
    pub frame2: Tensor<f32>,
}

/// Smooth random texture in `(0.05, 0.95)` with a sprinkling of empty pixels.
///
/// Built from a handful of sinusoids at several scales so that every
/// pyramid level sees structure.
pub fn texture(height: usize, width: usize, hole_fraction: f64, rng: &mut impl Rng) -> Vec<f32> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|i| {
            let scale = 2.0f64.powi(i % 6) / 64.0;
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = 1.0 / (1.0 + (i % 6) as f64 * 0.5);
            (scale * angle.cos(), scale * angle.sin(), phase, amp)
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let s: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| {
                    a * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin()
                })
                .sum();
            let v = 0.5 + 0.45 * s / norm;
            let hole = rng.gen_bool(hole_fraction);
            out.push(if hole { 0.0 } else { v as f32 });
        }
    }
    out
}

/// A `(1, 1, height, width)` texture drawn from `seed`.
pub fn texture_tensor(height: usize, width: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = texture(height, width, 0.05, &mut rng);
    Tensor::from_vec(Shape::new(1, 1, height, width), data).expect("sized to fit")
}

/// `count` pairs of `height x width` images related by a uniform horizontal
/// shift of `shift` whole pixels, cut from independent textures.
pub fn shift_pairs(
    count: usize,
    height: usize,
    width: usize,
    shift: usize,
    seed: u64,
) -> Vec<ShiftPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas_w = width + shift;
    (0..count)
        .map(|_| {
            let canvas = texture(height, canvas_w, 0.05, &mut rng);
            let shape = Shape::new(1, 1, height, width);
            let frame1 = Tensor::from_fn(shape, |_, _, y, x| canvas[y * canvas_w + x + shift]);
            let frame2 = Tensor::from_fn(shape, |_, _, y, x| canvas[y * canvas_w + x]);
            ShiftPair { frame1, frame2 }
        })
        .collect()
}

/// A sensor-centred street scene: ground plane, a ring of walls and a few
/// box-shaped obstacles, sampled by a 64-beam spinning LiDAR with its own
/// forward motion of `advance` meters applied to the whole scene.
pub fn street_scan(advance: f32, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes: Vec<(f32, f32, f32, f32)> = (0..14)
        .map(|_| {
            let r = rng.gen_range(6.0..30.0f32);
            let a = rng.gen_range(0.0..std::f32::consts::TAU);
            (
                r * a.cos(),
                r * a.sin(),
                rng.gen_range(0.8..2.5),
                rng.gen_range(1.0..3.0),
            )
        })
        .collect();
    let sensor_height = 1.73f32;
    let wall = 40.0f32;
    let mut points = Vec::with_capacity(64 * 2048);
    for beam in 0..64 {
        let pitch = (2.0 - 26.8 * beam as f32 / 63.0).to_radians();
        for step in 0..2048 {
            let yaw = std::f32::consts::TAU * step as f32 / 2048.0 + 0.0007 * beam as f32;
            let dir = (
                pitch.cos() * yaw.cos(),
                pitch.cos() * yaw.sin(),
                pitch.sin(),
            );
            let mut t = f32::INFINITY;
            if dir.2 < 0.0 {
                t = t.min(sensor_height / -dir.2);
            }
            let horiz = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
            if horiz > 1e-6 {
                t = t.min(wall / horiz);
            }
            for &(bx, by, half, top) in &boxes {
                if let Some(hit) = ray_box(dir, (bx - advance, by), half, top, sensor_height) {
                    t = t.min(hit);
                }
            }
            if t.is_finite() && t < 80.0 {
                points.push(Point {
                    x: dir.0 * t,
                    y: dir.1 * t,
                    z: dir.2 * t,
                    intensity: 0.5,
                });
            }
        }
    }
    points
}

// Slab test against an axis-aligned box standing on the ground.
fn ray_box(
    dir: (f32, f32, f32),
    centre: (f32, f32),
    half: f32,
    top: f32,
    sensor_height: f32,
) -> Option<f32> {
    let lo = [centre.0 - half, centre.1 - half, -sensor_height];
    let hi = [centre.0 + half, centre.1 + half, top - sensor_height];
    let d = [dir.0, dir.1, dir.2];
    let (mut t0, mut t1) = (0.0f32, f32::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-9 {
            if 0.0 < lo[k] || 0.0 > hi[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[k]) / d[k], (hi[k]) / d[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Writes a scan as a KITTI-style `.bin` byte buffer.
pub fn encode_velodyne(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
