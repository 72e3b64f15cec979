//! Dense optical flow fields.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-pixel displacement `(u, v)` in pixels of the field's own resolution.
///
/// Channel 0 is horizontal (`u`, positive to the right), channel 1 is
/// vertical (`v`, positive downwards).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor<f32>);

impl FlowField {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.shape().c != 2 {
            return Err(Error::shape(
                "flow field",
                "tensor",
                "(N, 2, H, W)",
                t.shape(),
            ));
        }
        Ok(Self(t))
    }

    pub fn zeros(n: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(Shape::new(n, 2, height, width)))
    }

    /// Same displacement at every pixel.
    pub fn uniform(n: usize, height: usize, width: usize, u: f32, v: f32) -> Self {
        Self(Tensor::from_fn(
            Shape::new(n, 2, height, width),
            |_, c, _, _| {
                if c == 0 {
                    u
                } else {
                    v
                }
            },
        ))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    /// Horizontal component plane of batch item `n`.
    pub fn u(&self, n: usize) -> &[f32] {
        let plane = self.0.shape().plane();
        &self.0.data()[2 * n * plane..(2 * n + 1) * plane]
    }

    pub fn v(&self, n: usize) -> &[f32] {
        let plane = self.0.shape().plane();
        &self.0.data()[(2 * n + 1) * plane..(2 * n + 2) * plane]
    }

    /// Mean of `(u, v)` over batch item 0 at pixels where `mask` is set
    /// (all pixels when `mask` is `None`).
    pub fn mean_over(&self, mask: Option<&[bool]>) -> (f64, f64) {
        let (mut su, mut sv, mut count) = (0.0, 0.0, 0usize);
        for (i, (&u, &v)) in self.u(0).iter().zip(self.v(0)).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                su += u as f64;
                sv += v as f64;
                count += 1;
            }
        }
        if count == 0 {
            (0.0, 0.0)
        } else {
            (su / count as f64, sv / count as f64)
        }
    }

    /// Mean of `|u|` and `|v|` over batch item 0, optionally masked.
    pub fn mean_abs_over(&self, mask: Option<&[bool]>) -> (f64, f64) {
        let (mut su, mut sv, mut count) = (0.0, 0.0, 0usize);
        for (i, (&u, &v)) in self.u(0).iter().zip(self.v(0)).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                su += (u as f64).abs();
                sv += (v as f64).abs();
                count += 1;
            }
        }
        if count == 0 {
            (0.0, 0.0)
        } else {
            (su / count as f64, sv / count as f64)
        }
    }

    /// Mean endpoint magnitude `sqrt(u^2 + v^2)` over batch item 0.
    pub fn mean_magnitude_over(&self, mask: Option<&[bool]>) -> f64 {
        let (mut s, mut count) = (0.0, 0usize);
        for (i, (&u, &v)) in self.u(0).iter().zip(self.v(0)).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                s += (u as f64).hypot(v as f64);
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            s / count as f64
        }
    }

    /// Keeps rows `[0, height)` and columns `[0, width)`.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self(self.0.crop_to(height, width)?))
    }
}
