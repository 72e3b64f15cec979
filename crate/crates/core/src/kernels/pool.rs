//! Global pooling along the spatial or channel axis, and 2x2 average pooling.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Reduce `H x W`, giving `(N, C, 1, 1)`.
    Spatial,
    /// Reduce `C`, giving `(N, 1, H, W)`.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

pub fn pooled_shape(s: Shape, axis: PoolAxis) -> Shape {
    match axis {
        PoolAxis::Spatial => Shape::new(s.n, s.c, 1, 1),
        PoolAxis::Channel => Shape::new(s.n, 1, s.h, s.w),
    }
}

/// Flat input indices reduced into output element `o`, in increasing order.
fn members(s: Shape, axis: PoolAxis, o: usize) -> impl Iterator<Item = usize> {
    let plane = s.plane();
    let (start, step, count) = match axis {
        PoolAxis::Spatial => (o * plane, 1, plane),
        PoolAxis::Channel => {
            let (n, p) = (o / plane, o % plane);
            (n * s.c * plane + p, plane, s.c)
        }
    };
    (0..count).map(move |k| start + k * step)
}

/// Returns the pooled tensor and, for max pooling, the flat argmax of each
/// output element (ties go to the lowest flat index).
pub fn pool_forward<T: Real>(
    input: &Tensor<T>,
    axis: PoolAxis,
    kind: PoolKind,
) -> (Tensor<T>, Option<Vec<usize>>) {
    let s = input.shape();
    let out_shape = pooled_shape(s, axis);
    let x = input.data();
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = (kind == PoolKind::Max).then(|| Vec::with_capacity(out_shape.numel()));
    for o in 0..out_shape.numel() {
        match kind {
            PoolKind::Avg => {
                let mut acc = T::zero();
                let mut count = 0usize;
                for i in members(s, axis, o) {
                    acc += x[i];
                    count += 1;
                }
                out.push(if count > 0 {
                    acc / T::lit(count as f64)
                } else {
                    T::zero()
                });
            }
            PoolKind::Max => {
                let mut best: Option<usize> = None;
                for i in members(s, axis, o) {
                    if best.is_none_or(|b| x[i] > x[b]) {
                        best = Some(i);
                    }
                }
                let b = best.unwrap_or(0);
                out.push(best.map_or(T::zero(), |b| x[b]));
                if let Some(a) = &mut argmax {
                    a.push(b);
                }
            }
        }
    }
    (
        Tensor::from_vec(out_shape, out).expect("pool output length"),
        argmax,
    )
}

pub fn pool_backward<T: Real>(
    input_shape: Shape,
    axis: PoolAxis,
    argmax: Option<&[usize]>,
    grad_out: &[T],
) -> Vec<T> {
    let mut g = vec![T::zero(); input_shape.numel()];
    match argmax {
        Some(idx) => {
            for (go, &i) in grad_out.iter().zip(idx) {
                g[i] += *go;
            }
        }
        None => {
            let count = match axis {
                PoolAxis::Spatial => input_shape.plane(),
                PoolAxis::Channel => input_shape.c,
            };
            let inv = T::one() / T::lit(count.max(1) as f64);
            for (o, go) in grad_out.iter().enumerate() {
                for i in members(input_shape, axis, o) {
                    g[i] += *go * inv;
                }
            }
        }
    }
    g
}

/// 2x2 average pooling with stride 2; extents must be even.
pub fn avg_pool2_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape(
            "avg_pool2",
            "input",
            "even height and width",
            s,
        ));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in input.data().chunks_exact(s.plane().max(1)).take(s.n * s.c) {
        for y in 0..oh {
            let r0 = &plane[2 * y * s.w..][..s.w];
            let r1 = &plane[(2 * y + 1) * s.w..][..s.w];
            for x in 0..ow {
                out.push((r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)
}

pub fn avg_pool2_backward<T: Real>(input_shape: Shape, grad_out: &[T]) -> Vec<T> {
    let s = input_shape;
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = T::lit(0.25);
    let mut g = vec![T::zero(); s.numel()];
    for (k, dst) in g
        .chunks_exact_mut(s.plane().max(1))
        .take(s.n * s.c)
        .enumerate()
    {
        let src = &grad_out[k * oh * ow..(k + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let v = src[y * ow + x] * quarter;
                dst[2 * y * s.w + 2 * x] += v;
                dst[2 * y * s.w + 2 * x + 1] += v;
                dst[(2 * y + 1) * s.w + 2 * x] += v;
                dst[(2 * y + 1) * s.w + 2 * x + 1] += v;
            }
        }
    }
    g
}
