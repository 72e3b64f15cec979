//! 2-D convolution by im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Shape, Tensor};

/// Stride, zero padding and dilation shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1, padding `dilation`: preserves extents for 3x3 kernels.
    pub const fn same3(dilation: usize) -> Self {
        Self::new(1, dilation, dilation)
    }

    /// `floor((len + 2p - d(k-1) - 1) / s) + 1`, or `None` if the kernel
    /// does not fit.
    pub fn output_extent(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub(crate) struct ConvPlan {
    pub input: Shape,
    pub out: Shape,
    pub kh: usize,
    pub kw: usize,
    pub geom: ConvGeometry,
}

impl ConvPlan {
    fn k(&self) -> usize {
        self.input.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out.plane()
    }
}

pub(crate) fn plan(
    input: Shape,
    weight: Shape,
    bias_len: Option<usize>,
    geom: ConvGeometry,
) -> Result<ConvPlan> {
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::Config(format!(
            "conv2d stride and dilation must be positive, got {geom:?}"
        )));
    }
    if weight.c != input.c {
        return Err(Error::shape(
            "conv2d",
            "weight",
            format!("(Cout, {}, kh, kw)", input.c),
            weight,
        ));
    }
    if let Some(len) = bias_len {
        if len != weight.n {
            return Err(Error::shape(
                "conv2d",
                "bias",
                format!("{} elements", weight.n),
                Shape::new(len, 1, 1, 1),
            ));
        }
    }
    let (kh, kw) = (weight.h, weight.w);
    let oh = geom.output_extent(input.h, kh);
    let ow = geom.output_extent(input.w, kw);
    match (oh, ow) {
        (Some(oh), Some(ow)) if kh > 0 && kw > 0 => Ok(ConvPlan {
            input,
            out: Shape::new(input.n, weight.n, oh, ow),
            kh,
            kw,
            geom,
        }),
        _ => Err(Error::shape(
            "conv2d",
            "input",
            format!("spatial extents large enough for a {kh}x{kw} kernel under {geom:?}"),
            input,
        )),
    }
}

fn im2col<T: Real>(src: &[T], plan: &ConvPlan, col: &mut [T]) {
    let ConvPlan {
        input, out, kh, kw, ..
    } = *plan;
    let ConvGeometry {
        stride: s,
        padding: p,
        dilation: d,
    } = plan.geom;
    let (h, w, oh, ow) = (input.h as isize, input.w as isize, out.h, out.w);
    let pp = oh * ow;
    for ci in 0..input.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * pp..(row + 1) * pp];
                let off = (kj * d) as isize - p as isize;
                for oy in 0..oh {
                    let iy = (oy * s + ki * d) as isize - p as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[(ci * input.h + iy as usize) * input.w..][..input.w];
                    if s == 1 {
                        let lo = (-off).clamp(0, ow as isize) as usize;
                        let hi = (w - off).clamp(lo as isize, ow as isize) as usize;
                        drow[..lo].fill(T::zero());
                        if hi > lo {
                            let start = (lo as isize + off) as usize;
                            drow[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                        }
                        drow[hi..].fill(T::zero());
                    } else {
                        for (ox, v) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + off;
                            *v = if ix >= 0 && ix < w {
                                srow[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], plan: &ConvPlan, dst: &mut [T]) {
    let ConvPlan {
        input, out, kh, kw, ..
    } = *plan;
    let ConvGeometry {
        stride: s,
        padding: p,
        dilation: d,
    } = plan.geom;
    let (h, w, oh, ow) = (input.h as isize, input.w as isize, out.h, out.w);
    let pp = oh * ow;
    for ci in 0..input.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * pp..(row + 1) * pp];
                let off = (kj * d) as isize - p as isize;
                for oy in 0..oh {
                    let iy = (oy * s + ki * d) as isize - p as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let drow = &mut dst[(ci * input.h + iy as usize) * input.w..][..input.w];
                    if s == 1 {
                        let lo = (-off).clamp(0, ow as isize) as usize;
                        let hi = (w - off).clamp(lo as isize, ow as isize) as usize;
                        if hi == lo {
                            continue;
                        }
                        let start = (lo as isize + off) as usize;
                        for (dv, sv) in drow[start..start + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *dv += *sv;
                        }
                    } else {
                        for (ox, sv) in srow.iter().enumerate() {
                            let ix = (ox * s) as isize + off;
                            if ix >= 0 && ix < w {
                                drow[ix as usize] += *sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let plan = plan(input.shape(), weight.shape(), bias.map(|b| b.numel()), geom)?;
    let (k, pp) = (plan.k(), plan.p());
    let cout = plan.out.c;
    let in_per = plan.input.c * plan.input.plane();
    let out_per = cout * pp;
    let mut out = vec![T::zero(); plan.out.numel()];
    let pointwise = plan.geom.is_pointwise(plan.kh, plan.kw);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * pp]
    };
    let wmat = Mat::new(weight.data(), cout, k);
    for n in 0..plan.input.n {
        let src = &input.data()[n * in_per..(n + 1) * in_per];
        let dst = &mut out[n * out_per..(n + 1) * out_per];
        if let Some(b) = bias {
            for (row, bv) in dst.chunks_exact_mut(pp).zip(b.data()) {
                row.fill(*bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if pointwise {
            gemm(T::one(), wmat, Mat::new(src, k, pp), beta, dst);
        } else {
            im2col(src, &plan, &mut col);
            gemm(T::one(), wmat, Mat::new(&col, k, pp), beta, dst);
        }
    }
    Tensor::from_vec(plan.out, out)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Vector-Jacobian products of [`conv2d_forward`]; only the requested
/// operands are computed.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &[T],
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (need_input, need_weight, need_bias) = need;
    let plan = plan(input.shape(), weight.shape(), None, geom)?;
    let (k, pp) = (plan.k(), plan.p());
    let cout = plan.out.c;
    let in_per = plan.input.c * plan.input.plane();
    let out_per = cout * pp;
    assert_eq!(grad_out.len(), plan.out.numel());

    let pointwise = plan.geom.is_pointwise(plan.kh, plan.kw);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * pp]
    };
    let mut dcol = if pointwise || !need_input {
        Vec::new()
    } else {
        vec![T::zero(); k * pp]
    };
    let mut g_input = need_input.then(|| vec![T::zero(); input.numel()]);
    let mut g_weight = need_weight.then(|| vec![T::zero(); weight.numel()]);
    let mut g_bias = need_bias.then(|| vec![T::zero(); cout]);
    let wmat = Mat::new(weight.data(), cout, k);

    for n in 0..plan.input.n {
        let src = &input.data()[n * in_per..(n + 1) * in_per];
        let gout = Mat::new(&grad_out[n * out_per..(n + 1) * out_per], cout, pp);
        if let Some(gw) = &mut g_weight {
            if pointwise {
                gemm(T::one(), gout, Mat::new(src, k, pp).t(), T::one(), gw);
            } else {
                im2col(src, &plan, &mut col);
                gemm(T::one(), gout, Mat::new(&col, k, pp).t(), T::one(), gw);
            }
        }
        if let Some(gb) = &mut g_bias {
            for (b, row) in gb.iter_mut().zip(gout.data.chunks_exact(pp)) {
                *b += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gi) = &mut g_input {
            let dst = &mut gi[n * in_per..(n + 1) * in_per];
            if pointwise {
                gemm(T::one(), wmat.t(), gout, T::zero(), dst);
            } else {
                gemm(T::one(), wmat.t(), gout, T::zero(), &mut dcol);
                col2im(&dcol, &plan, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: g_input,
        weight: g_weight,
        bias: g_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::new(2, 1, 1);
        assert_eq!(g.output_extent(64, 3), Some(32));
        assert_eq!(ConvGeometry::same3(16).output_extent(1, 3), Some(1));
        assert_eq!(ConvGeometry::new(1, 0, 1).output_extent(2, 3), None);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::scalar(5.0);
        let w = Tensor::<f64>::scalar(1.0);
        let b = Tensor::<f64>::scalar(0.0);
        let y = conv2d_forward(&x, &w, Some(&b), ConvGeometry::new(1, 0, 1)).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let c = 1.5;
        let x = Tensor::<f64>::full(Shape::new(1, 1, 5, 6), c);
        let w = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d_forward(&x, &w, None, ConvGeometry::same3(1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 5, 6));
        assert_eq!(y.at(0, 0, 2, 3), 9.0 * c);
        assert_eq!(y.at(0, 0, 0, 0), 4.0 * c);
        assert_eq!(y.at(0, 0, 4, 5), 4.0 * c);
        assert_eq!(y.at(0, 0, 0, 3), 6.0 * c);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(2, 2, 3, 3));
        let err = conv2d_forward(&x, &w, None, ConvGeometry::same3(1)).unwrap_err();
        assert!(matches!(
            err,
            Error::ShapeMismatch {
                operand: "weight",
                ..
            }
        ));
    }

    #[test]
    fn bias_length_mismatch_is_reported() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(3, 2, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(2, 1, 1, 1));
        let err = conv2d_forward(&x, &w, Some(&b), ConvGeometry::same3(1)).unwrap_err();
        assert!(matches!(
            err,
            Error::ShapeMismatch {
                operand: "bias",
                ..
            }
        ));
    }
}
