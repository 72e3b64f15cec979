//! Portable pixmaps for range images (`P5`) and flow fields (`P6`).

use crate::flow::FlowField;
use crate::projection::RangeImage;

/// 8-bit grayscale, linear in `range / max_range`: empty is black,
/// `max_range` is white.
pub fn range_pgm(img: &RangeImage, max_range: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.ranges().iter().map(|&r| {
        let v = (r as f64 / max_range).clamp(0.0, 1.0);
        (v * 255.0).round() as u8
    }));
    out
}

// Hue segments of the Middlebury wheel: red-yellow, yellow-green,
// green-cyan, cyan-blue, blue-magenta, magenta-red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(SEGMENTS.iter().sum());
    let ramps: [(usize, usize, bool); 6] = [
        (0, 1, true),
        (1, 0, false),
        (1, 2, true),
        (2, 1, false),
        (2, 0, true),
        (0, 2, false),
    ];
    for (&len, &(fixed, moving, rising)) in SEGMENTS.iter().zip(&ramps) {
        for i in 0..len {
            let mut c = [0.0; 3];
            c[fixed] = 255.0;
            let t = (255 * i / len) as f64;
            c[moving] = if rising { t } else { 255.0 - t };
            wheel.push(c);
        }
    }
    wheel
}

/// Color of one flow vector already divided by the normalization radius.
pub fn flow_color(u: f64, v: f64, wheel: &[[f64; 3]]) -> [u8; 3] {
    let n = wheel.len();
    let rad = u.hypot(v);
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = fk.floor() as usize % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    let mut px = [0u8; 3];
    for ch in 0..3 {
        let c = ((1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch]) / 255.0;
        let c = if rad <= 1.0 {
            1.0 - rad * (1.0 - c)
        } else {
            c * 0.75
        };
        px[ch] = (255.0 * c).round() as u8;
    }
    px
}

/// Flow of batch item 0 on the standard color wheel, saturating at
/// `max_magnitude` (the field's largest magnitude when `None`). Zero flow is
/// white.
pub fn flow_ppm(flow: &FlowField, max_magnitude: Option<f64>) -> Vec<u8> {
    let (u, v) = (flow.u(0), flow.v(0));
    let max = max_magnitude.unwrap_or_else(|| {
        u.iter()
            .zip(v)
            .map(|(&a, &b)| (a as f64).hypot(b as f64))
            .fold(0.0, f64::max)
    });
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    let wheel = color_wheel();
    let mut out = format!("P6\n{} {}\n255\n", flow.width(), flow.height()).into_bytes();
    for (&a, &b) in u.iter().zip(v) {
        out.extend(flow_color(a as f64 * scale, b as f64 * scale, &wheel));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixels(bytes: &[u8]) -> &[u8] {
        // Three header lines.
        let mut nl = 0;
        let pos = bytes
            .iter()
            .position(|&b| {
                nl += (b == b'\n') as usize;
                nl == 3
            })
            .unwrap();
        &bytes[pos + 1..]
    }

    #[test]
    fn range_endpoints() {
        let img = RangeImage::from_ranges(1, 3, vec![0.0, 85.0, 42.5]).unwrap();
        let out = range_pgm(&img, 85.0);
        assert!(out.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(pixels(&out), &[0, 255, 128]);
    }

    #[test]
    fn zero_flow_is_white() {
        let out = flow_ppm(&FlowField::zeros(1, 2, 2), None);
        assert!(pixels(&out).iter().all(|&b| b == 255));
    }

    #[test]
    fn wheel_has_55_hues_starting_red() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [255.0, 0.0, 0.0]);
        assert_eq!(w[15], [255.0, 255.0, 0.0]);
    }
}
