//! Spherical projection of LiDAR point clouds into range images.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Pitch tolerance (radians) when testing the vertical field of view, so
/// points on the boundary survive `f32` coordinates and `asin` rounding.
const FOV_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32) -> Self {
        Self {
            x,
            y,
            z,
            intensity: 0.0,
        }
    }

    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// Image size and sensor geometry; angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub width: usize,
    pub height: usize,
    pub fov_up: f64,
    pub fov_down: f64,
    pub max_range: f64,
}

impl Default for ProjectionConfig {
    /// Velodyne HDL-64E as mounted on the KITTI car.
    fn default() -> Self {
        Self {
            width: 1024,
            height: 64,
            fov_up: 3.0,
            fov_down: -25.0,
            max_range: 85.0,
        }
    }
}

impl ProjectionConfig {
    /// Total vertical field of view in degrees.
    pub fn fov(&self) -> f64 {
        self.fov_up.abs() + self.fov_down.abs()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config(format!(
                "range image must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.fov() > 0.0) || !self.fov_up.is_finite() || !self.fov_down.is_finite() {
            return Err(Error::Config(format!(
                "vertical field of view must be positive (up {}, down {})",
                self.fov_up, self.fov_down
            )));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::Config(format!(
                "max_range must be positive, got {}",
                self.max_range
            )));
        }
        Ok(())
    }

    /// Stable digest of every field, used to key cached projections.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(40);
        bytes.extend_from_slice(&(self.width as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.height as u64).to_le_bytes());
        for v in [self.fov_up, self.fov_down, self.max_range] {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        xxhash_rust::xxh3::xxh3_64(&bytes)
    }

    /// Pixel `(u, v)` (column, row) of a point, or `None` when the point is
    /// at the origin, beyond `max_range`, or outside the vertical FOV.
    pub fn pixel_of(&self, p: &Point) -> Option<(usize, usize)> {
        let rho = p.range();
        if !(rho > 0.0) || rho > self.max_range {
            return None;
        }
        let (up, down) = (self.fov_up.to_radians(), self.fov_down.to_radians());
        let pitch = (p.z as f64 / rho).asin();
        if pitch > up + FOV_EPS || pitch < down - FOV_EPS {
            return None;
        }
        let yaw = (p.y as f64).atan2(p.x as f64);
        let fov = self.fov().to_radians();
        let u = 0.5 * (1.0 - yaw / std::f64::consts::PI) * self.width as f64;
        let v = (1.0 - (pitch + down.abs()) / fov) * self.height as f64;
        let u = (u.floor().max(0.0) as usize).min(self.width - 1);
        let v = (v.floor().max(0.0) as usize).min(self.height - 1);
        Some((u, v))
    }
}

/// `height x width` grid of ranges in meters; `0` marks a pixel with no return.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    ranges: Vec<f32>,
    occupancy: Vec<bool>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ranges: vec![0.0; height * width],
            occupancy: vec![false; height * width],
        }
    }

    /// Builds an image from row-major ranges; occupancy is derived from them.
    pub fn from_ranges(height: usize, width: usize, ranges: Vec<f32>) -> Result<Self> {
        if ranges.len() != height * width {
            return Err(Error::BufferLength {
                len: ranges.len(),
                shape: Shape::new(1, 1, height, width),
                expected: height * width,
            });
        }
        if let Some(index) = ranges.iter().position(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::NonFinite {
                what: "range image (ranges must be finite and non-negative)".into(),
                index,
            });
        }
        let occupancy = ranges.iter().map(|&r| r > 0.0).collect();
        Ok(Self {
            height,
            width,
            ranges,
            occupancy,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ranges(&self) -> &[f32] {
        &self.ranges
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.ranges[row * self.width + col]
    }

    pub fn occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn occupancy_fraction(&self) -> f64 {
        self.occupied() as f64 / self.ranges.len().max(1) as f64
    }

    /// Ranges in meters as a `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.ranges.clone(),
        )
        .expect("range image extents")
    }

    /// Inverse of [`RangeImage::to_tensor`]; negative values are clamped to 0.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::shape("range image", "tensor", "(1, 1, H, W)", s));
        }
        Self::from_ranges(s.h, s.w, t.data().iter().map(|v| v.max(0.0)).collect())
    }

    fn put(&mut self, row: usize, col: usize, range: f32) {
        let i = row * self.width + col;
        if !self.occupancy[i] || range < self.ranges[i] {
            self.ranges[i] = range;
            self.occupancy[i] = true;
        }
    }
}

/// Projects points into a range image, keeping the nearest return per pixel.
pub fn project_cloud(points: &[Point], config: &ProjectionConfig) -> Result<RangeImage> {
    config.validate()?;
    let mut img = RangeImage::empty(config.height, config.width);
    for p in points.iter().filter(|p| p.is_finite()) {
        if let Some((u, v)) = config.pixel_of(p) {
            let rho = p.range() as f32;
            if rho > 0.0 {
                img.put(v, u, rho);
            }
        }
    }
    Ok(img)
}

/// Ranges scaled by `1 / max_range` as a `(1, 1, H, W)` network input.
pub fn normalize(img: &RangeImage, config: &ProjectionConfig) -> Tensor<f32> {
    Tensor::from_vec(
        Shape::new(1, 1, img.height, img.width),
        img.ranges
            .iter()
            .map(|&r| (r as f64 / config.max_range) as f32)
            .collect(),
    )
    .expect("range image extents")
}
