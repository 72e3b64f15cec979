//! Bilinear resampling: flow-driven backward warping and 2x upsampling.
//!
//! Pixel `(x, y)` has its center at integer coordinates. Samples that fall
//! outside the image read zero.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Corner indices and weights of one bilinear sample.
#[derive(Clone, Copy)]
struct Taps<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

impl<T: Real> Taps<T> {
    fn at(sx: T, sy: T) -> Self {
        let x0 = sx.floor();
        let y0 = sy.floor();
        Self {
            x0: x0.to_isize().unwrap_or(isize::MIN / 2),
            y0: y0.to_isize().unwrap_or(isize::MIN / 2),
            fx: sx - x0,
            fy: sy - y0,
        }
    }
}

#[inline]
fn fetch<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

#[inline]
fn scatter<T: Real>(plane: &mut [T], h: usize, w: usize, y: isize, x: isize, v: T) {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize] += v;
    }
}

fn check_flow(source: Shape, flow: Shape) -> Result<()> {
    if flow.n != source.n || flow.c != 2 || flow.h != source.h || flow.w != source.w {
        return Err(Error::shape(
            "backwarp",
            "flow",
            format!("({}, 2, {}, {})", source.n, source.h, source.w),
            flow,
        ));
    }
    Ok(())
}

/// `out(x, y) = source(x + u(x, y), y + v(x, y))`, bilinear, zero outside.
pub fn backwarp_forward<T: Real>(source: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let s = source.shape();
    check_flow(s, flow.shape())?;
    let (h, w) = (s.h, s.w);
    let plane = s.plane();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let fl = &flow.data()[n * 2 * plane..(n + 1) * 2 * plane];
        let (fu, fv) = fl.split_at(plane);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = T::lit(x as f64) + fu[p];
                let sy = T::lit(y as f64) + fv[p];
                let t = Taps::at(sx, sy);
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    let src = &source.data()[base..base + plane];
                    out[base + p] = sample(src, h, w, t);
                }
            }
        }
    }
    Tensor::from_vec(s, out)
}

#[inline]
fn sample<T: Real>(src: &[T], h: usize, w: usize, t: Taps<T>) -> T {
    let Taps { x0, y0, fx, fy } = t;
    if fx == T::zero() && fy == T::zero() {
        return fetch(src, h, w, y0, x0);
    }
    let one = T::one();
    let v00 = fetch(src, h, w, y0, x0);
    let v01 = fetch(src, h, w, y0, x0 + 1);
    let v10 = fetch(src, h, w, y0 + 1, x0);
    let v11 = fetch(src, h, w, y0 + 1, x0 + 1);
    (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
}

/// Gradients of [`backwarp_forward`] with respect to source and flow.
pub fn backwarp_backward<T: Real>(
    source: &Tensor<T>,
    flow: &Tensor<T>,
    grad_out: &[T],
    need_source: bool,
    need_flow: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let s = source.shape();
    let (h, w) = (s.h, s.w);
    let plane = s.plane();
    let one = T::one();
    let mut g_src = need_source.then(|| vec![T::zero(); s.numel()]);
    let mut g_flow = need_flow.then(|| vec![T::zero(); flow.numel()]);
    for n in 0..s.n {
        let fbase = n * 2 * plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = T::lit(x as f64) + flow.data()[fbase + p];
                let sy = T::lit(y as f64) + flow.data()[fbase + plane + p];
                let Taps { x0, y0, fx, fy } = Taps::at(sx, sy);
                let (mut du, mut dv) = (T::zero(), T::zero());
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    let g = grad_out[base + p];
                    if g == T::zero() {
                        continue;
                    }
                    if let Some(gs) = &mut g_src {
                        let dst = &mut gs[base..base + plane];
                        scatter(dst, h, w, y0, x0, g * (one - fx) * (one - fy));
                        scatter(dst, h, w, y0, x0 + 1, g * fx * (one - fy));
                        scatter(dst, h, w, y0 + 1, x0, g * (one - fx) * fy);
                        scatter(dst, h, w, y0 + 1, x0 + 1, g * fx * fy);
                    }
                    if need_flow {
                        let src = &source.data()[base..base + plane];
                        let v00 = fetch(src, h, w, y0, x0);
                        let v01 = fetch(src, h, w, y0, x0 + 1);
                        let v10 = fetch(src, h, w, y0 + 1, x0);
                        let v11 = fetch(src, h, w, y0 + 1, x0 + 1);
                        du += g * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                        dv += g * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                }
                if let Some(gf) = &mut g_flow {
                    gf[fbase + p] += du;
                    gf[fbase + plane + p] += dv;
                }
            }
        }
    }
    (g_src, g_flow)
}

/// Source coordinate and neighbour weight for one output index of a 2x
/// bilinear upsample with half-pixel centers (no corner alignment).
#[inline]
fn up_taps<T: Real>(i: usize, len: usize) -> (usize, usize, T) {
    let s = ((T::lit(i as f64) + T::lit(0.5)) * T::lit(0.5) - T::lit(0.5)).max(T::zero());
    let i0 = s.floor();
    let frac = s - i0;
    let i0 = i0.to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, frac)
}

pub fn upsample2x_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let one = T::one();
    let xt: Vec<_> = (0..ow).map(|x| up_taps::<T>(x, s.w)).collect();
    for plane in input.data().chunks_exact(s.plane().max(1)).take(s.n * s.c) {
        for oy in 0..oh {
            let (y0, y1, fy) = up_taps::<T>(oy, s.h);
            let r0 = &plane[y0 * s.w..(y0 + 1) * s.w];
            let r1 = &plane[y1 * s.w..(y1 + 1) * s.w];
            for &(x0, x1, fx) in &xt {
                let top = (one - fx) * r0[x0] + fx * r0[x1];
                let bot = (one - fx) * r1[x0] + fx * r1[x1];
                out.push((one - fy) * top + fy * bot);
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("upsample output length")
}

pub fn upsample2x_backward<T: Real>(input_shape: Shape, grad_out: &[T]) -> Vec<T> {
    let s = input_shape;
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let one = T::one();
    let mut g = vec![T::zero(); s.numel()];
    let xt: Vec<_> = (0..ow).map(|x| up_taps::<T>(x, s.w)).collect();
    for (k, dst) in g
        .chunks_exact_mut(s.plane().max(1))
        .take(s.n * s.c)
        .enumerate()
    {
        let src = &grad_out[k * oh * ow..(k + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = up_taps::<T>(oy, s.h);
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let go = src[oy * ow + ox];
                dst[y0 * s.w + x0] += go * (one - fy) * (one - fx);
                dst[y0 * s.w + x1] += go * (one - fy) * fx;
                dst[y1 * s.w + x0] += go * fy * (one - fx);
                dst[y1 * s.w + x1] += go * fy * fx;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_row_convention() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        let y = upsample2x_forward(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(&y.data()[..4], &[0.0, 0.5, 1.5, 2.0]);
        assert_eq!(&y.data()[4..], &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn upsample_single_pixel() {
        let x = Tensor::<f32>::scalar(7.0);
        assert_eq!(upsample2x_forward(&x).data(), &[7.0; 4]);
    }

    #[test]
    fn half_pixel_shift_averages() {
        let src = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        let flow = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let out = backwarp_forward(&src, &flow).unwrap();
        assert_eq!(out.data()[0], 1.0);
        // second pixel samples halfway between 2 and the zero border
        assert_eq!(out.data()[1], 1.0);
    }

    #[test]
    fn flow_shape_is_checked() {
        let src = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let flow = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 5));
        assert!(matches!(
            backwarp_forward(&src, &flow),
            Err(Error::ShapeMismatch {
                operand: "flow",
                ..
            })
        ));
    }
}
