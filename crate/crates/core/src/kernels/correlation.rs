//! Local correlation (cost volume) between two feature maps.
//!
//! Output channel `(dy + r) * (2r + 1) + (dx + r)` at pixel `p` holds
//! `(1/C) * sum_c f1(c, p) * f2(c, p + (dx, dy))`; `f2` reads zero outside
//! the image.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub fn correlation_channels(max_disp: usize) -> usize {
    (2 * max_disp + 1) * (2 * max_disp + 1)
}

/// Valid `[lo, hi)` range of `i` such that `0 <= i + d < len`.
#[inline]
fn valid(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).clamp(0, len as isize) as usize;
    let hi = (len as isize - d).clamp(lo as isize, len as isize) as usize;
    (lo, hi)
}

fn displacements(r: usize) -> impl Iterator<Item = (usize, isize, isize)> {
    let r = r as isize;
    (-r..=r)
        .flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
        .enumerate()
        .map(|(k, (dy, dx))| (k, dy, dx))
}

pub fn correlation_forward<T: Real>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    max_disp: usize,
) -> Result<Tensor<T>> {
    let s = f1.shape();
    if f2.shape() != s {
        return Err(Error::shape("correlation", "f2", s.to_string(), f2.shape()));
    }
    let d = correlation_channels(max_disp);
    let out_shape = Shape::new(s.n, d, s.h, s.w);
    let mut out = vec![T::zero(); out_shape.numel()];
    let plane = s.plane();
    let inv_c = if s.c > 0 {
        T::one() / T::lit(s.c as f64)
    } else {
        T::zero()
    };
    for n in 0..s.n {
        for (k, dy, dx) in displacements(max_disp) {
            let dst = &mut out[(n * d + k) * plane..][..plane];
            let (ylo, yhi) = valid(dy, s.h);
            let (xlo, xhi) = valid(dx, s.w);
            if xlo == xhi || ylo == yhi {
                continue;
            }
            for c in 0..s.c {
                let a = &f1.data()[(n * s.c + c) * plane..][..plane];
                let b = &f2.data()[(n * s.c + c) * plane..][..plane];
                for y in ylo..yhi {
                    let yb = (y as isize + dy) as usize;
                    let row_a = &a[y * s.w..][xlo..xhi];
                    let start = (xlo as isize + dx) as usize;
                    let row_b = &b[yb * s.w + start..][..xhi - xlo];
                    let row_o = &mut dst[y * s.w..][xlo..xhi];
                    for ((o, va), vb) in row_o.iter_mut().zip(row_a).zip(row_b) {
                        *o += *va * *vb;
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv_c);
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn correlation_backward<T: Real>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    max_disp: usize,
    grad_out: &[T],
    need: (bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let s = f1.shape();
    let d = correlation_channels(max_disp);
    let plane = s.plane();
    let inv_c = if s.c > 0 {
        T::one() / T::lit(s.c as f64)
    } else {
        T::zero()
    };
    let mut g1 = need.0.then(|| vec![T::zero(); s.numel()]);
    let mut g2 = need.1.then(|| vec![T::zero(); s.numel()]);
    let scaled: Vec<T> = grad_out.iter().map(|g| *g * inv_c).collect();
    for n in 0..s.n {
        for (k, dy, dx) in displacements(max_disp) {
            let go = &scaled[(n * d + k) * plane..][..plane];
            let (ylo, yhi) = valid(dy, s.h);
            let (xlo, xhi) = valid(dx, s.w);
            if xlo == xhi || ylo == yhi {
                continue;
            }
            let start = (xlo as isize + dx) as usize;
            for c in 0..s.c {
                let off = (n * s.c + c) * plane;
                let a = &f1.data()[off..off + plane];
                let b = &f2.data()[off..off + plane];
                for y in ylo..yhi {
                    let yb = (y as isize + dy) as usize;
                    let row_g = &go[y * s.w..][xlo..xhi];
                    if let Some(g1) = &mut g1 {
                        let row_b = &b[yb * s.w + start..][..xhi - xlo];
                        let dst = &mut g1[off + y * s.w..][xlo..xhi];
                        for ((o, g), vb) in dst.iter_mut().zip(row_g).zip(row_b) {
                            *o += *g * *vb;
                        }
                    }
                    if let Some(g2) = &mut g2 {
                        let row_a = &a[y * s.w..][xlo..xhi];
                        let dst = &mut g2[off + yb * s.w + start..][..xhi - xlo];
                        for ((o, g), va) in dst.iter_mut().zip(row_g).zip(row_a) {
                            *o += *g * *va;
                        }
                    }
                }
            }
        }
    }
    (g1, g2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_features_center_channel() {
        let f = Tensor::<f64>::full(Shape::new(1, 4, 5, 5), 2.0);
        let cv = correlation_forward(&f, &f, 1).unwrap();
        assert_eq!(cv.shape(), Shape::new(1, 9, 5, 5));
        assert_eq!(cv.at(0, 4, 2, 2), 4.0);
        // corner displacement at the top-left pixel reads outside the image
        assert_eq!(cv.at(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn radius_wider_than_map() {
        let f = Tensor::<f64>::full(Shape::new(1, 2, 1, 1), 3.0);
        let cv = correlation_forward(&f, &f, 4).unwrap();
        assert_eq!(cv.sum(), 9.0);
        assert_eq!(cv.at(0, 40, 0, 0), 9.0);
        let (g1, g2) = correlation_backward(&f, &f, 4, &vec![1.0; 81], (true, true));
        assert_eq!(g1.unwrap(), vec![1.5, 1.5]);
        assert_eq!(g2.unwrap(), vec![1.5, 1.5]);
    }

    #[test]
    fn displacement_channel_layout() {
        // f2 has a single hot pixel at (y=2, x=3); f1 hot at (2, 2).
        let mut f1 = Tensor::<f64>::zeros(Shape::new(1, 1, 5, 5));
        let mut f2 = Tensor::<f64>::zeros(Shape::new(1, 1, 5, 5));
        f1.set(0, 0, 2, 2, 1.0);
        f2.set(0, 0, 2, 3, 1.0);
        let cv = correlation_forward(&f1, &f2, 1).unwrap();
        // dx = +1, dy = 0 -> k = (0 + 1) * 3 + (1 + 1) = 5
        assert_eq!(cv.at(0, 5, 2, 2), 1.0);
        assert_eq!(cv.sum(), 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        assert!(correlation_forward(&a, &b, 1).is_err());
    }
}
