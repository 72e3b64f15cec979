//! Photometric reconstruction losses.
//!
//! At every pyramid level the second frame is warped back by that level's
//! flow and compared with the first frame. Training weights the per-level
//! errors by `alpha`; fine-tuning also masks out pixels where the reference
//! frame has no return and adds `gamma * ||theta||_2` over all parameters.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::avg_pool2_forward;
use crate::model::LevelFlows;
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// How a per-level residual is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualNorm {
    /// `sqrt(mean(d^2))`, independent of the level's resolution.
    Rms,
    /// `sqrt(sum(d^2))`.
    Euclidean,
}

/// How the occupancy mask enters the fine-tuning loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Residual restricted to occupied reference pixels and averaged over them.
    Gated,
    /// `backwarp(I2) * M - I1`, averaged over every pixel.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight per level, index 0 = level 1 (full resolution).
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub norm: ResidualNorm,
    pub mask_mode: MaskMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: vec![0.3, 0.06, 0.08, 0.1, 0.12, 0.14, 0.2],
            gamma: 1e-6,
            norm: ResidualNorm::Rms,
            mask_mode: MaskMode::Gated,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::Config(format!(
                "level weights must be positive, got {:?}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            alpha: self.alpha.iter().map(|a| a * factor).collect(),
            ..self.clone()
        }
    }
}

/// Level 1 is the input; each next level is a 2x2 average of the previous.
pub fn image_pyramid<T: Real>(image: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(levels);
    out.push(image.clone());
    for _ in 1..levels {
        let next = avg_pool2_forward(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

/// Occupancy mask of a (downsampled) reference image: 1 where it is > 0.
pub fn occupancy_mask<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    image.map(|v| if v > T::zero() { T::one() } else { T::zero() })
}

/// Both frames' image pyramids and reference masks, bound as constants.
pub struct FramePyramids {
    pub reference: Vec<Var>,
    pub target: Vec<Var>,
    pub masks: Vec<Var>,
    counts: Vec<f64>,
    pixels: Vec<f64>,
}

impl FramePyramids {
    pub fn new<T: Real>(
        g: &mut Graph<T>,
        frame1: &Tensor<T>,
        frame2: &Tensor<T>,
        levels: usize,
    ) -> Result<Self> {
        if frame1.shape() != frame2.shape() {
            return Err(Error::shape(
                "loss",
                "frame2",
                frame1.shape().to_string(),
                frame2.shape(),
            ));
        }
        let p1 = image_pyramid(frame1, levels)?;
        let p2 = image_pyramid(frame2, levels)?;
        let mut out = Self {
            reference: Vec::with_capacity(levels),
            target: Vec::with_capacity(levels),
            masks: Vec::with_capacity(levels),
            counts: Vec::with_capacity(levels),
            pixels: Vec::with_capacity(levels),
        };
        for (a, b) in p1.into_iter().zip(p2) {
            let mask = occupancy_mask(&a);
            out.counts.push(mask.sum().as_f64());
            out.pixels.push(a.numel() as f64);
            out.masks.push(g.constant(mask));
            out.reference.push(g.constant(a));
            out.target.push(g.constant(b));
        }
        Ok(out)
    }

    pub fn levels(&self) -> usize {
        self.reference.len()
    }
}

/// Loss value with its per-level photometric terms.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub levels: Vec<Var>,
    pub regularizer: Option<Var>,
}

/// The second frame at `flow`'s level, warped back toward the first.
pub fn reconstruct<T: Real>(g: &mut Graph<T>, target: Var, flow: Var) -> Result<Var> {
    g.backwarp(target, flow)
}

fn reduce<T: Real>(g: &mut Graph<T>, residual: Var, count: f64, norm: ResidualNorm) -> Var {
    let sq = g.square(residual);
    let sum = g.sum(sq);
    let scaled = match norm {
        ResidualNorm::Rms => g.scale(sum, if count > 0.0 { 1.0 / count } else { 0.0 }),
        ResidualNorm::Euclidean => sum,
    };
    g.sqrt(scaled)
}

fn weighted_sum<T: Real>(g: &mut Graph<T>, terms: &[Var], alpha: &[f64]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&t, &a) in terms.iter().zip(alpha) {
        let w = g.scale(t, a);
        total = Some(match total {
            Some(acc) => g.add(acc, w)?,
            None => w,
        });
    }
    total.ok_or(Error::MissingLevel(1))
}

fn check_levels(flows: &LevelFlows, frames: &FramePyramids, w: &LossWeights) -> Result<()> {
    w.validate()?;
    let needed = w.alpha.len();
    if frames.levels() < needed {
        return Err(Error::Config(format!(
            "{} image levels for {needed} loss weights",
            frames.levels()
        )));
    }
    for level in 1..=needed {
        flows.level(level)?;
    }
    Ok(())
}

/// `sum_l alpha_l * ||backwarp(I2^l, F^l) - I1^l||`.
pub fn training_loss<T: Real>(
    g: &mut Graph<T>,
    flows: &LevelFlows,
    frames: &FramePyramids,
    w: &LossWeights,
) -> Result<LossTerms> {
    check_levels(flows, frames, w)?;
    let mut levels = Vec::with_capacity(w.alpha.len());
    for l in 0..w.alpha.len() {
        let rec = reconstruct(g, frames.target[l], flows.level(l + 1)?)?;
        let d = g.sub(rec, frames.reference[l])?;
        levels.push(reduce(g, d, frames.pixels[l], w.norm));
    }
    let total = weighted_sum(g, &levels, &w.alpha)?;
    Ok(LossTerms {
        total,
        levels,
        regularizer: None,
    })
}

/// Masked photometric loss plus `gamma * ||theta||_2`.
///
/// A level whose mask is empty contributes zero.
pub fn finetune_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    flows: &LevelFlows,
    frames: &FramePyramids,
    w: &LossWeights,
) -> Result<LossTerms> {
    check_levels(flows, frames, w)?;
    let mut levels = Vec::with_capacity(w.alpha.len());
    for l in 0..w.alpha.len() {
        let rec = reconstruct(g, frames.target[l], flows.level(l + 1)?)?;
        let term = match w.mask_mode {
            MaskMode::Gated => {
                let d = g.sub(rec, frames.reference[l])?;
                let d = g.mul(d, frames.masks[l])?;
                reduce(g, d, frames.counts[l], w.norm)
            }
            MaskMode::Literal => {
                let masked = g.mul(rec, frames.masks[l])?;
                let d = g.sub(masked, frames.reference[l])?;
                reduce(g, d, frames.pixels[l], w.norm)
            }
        };
        levels.push(term);
    }
    let mut total = weighted_sum(g, &levels, &w.alpha)?;
    let mut regularizer = None;
    if w.gamma > 0.0 && !store.is_empty() {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut acc: Option<Var> = None;
        for name in names {
            let p = g.param(store, &name)?;
            let sq = g.square(p);
            let s = g.sum(sq);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        let norm = g.sqrt(acc.expect("non-empty store"));
        let reg = g.scale(norm, w.gamma);
        total = g.add(total, reg)?;
        regularizer = Some(reg);
    }
    Ok(LossTerms {
        total,
        levels,
        regularizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn pyramid_of_block() {
        let t = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        let p = image_pyramid(&t, 2).unwrap();
        assert_eq!(p[1].data(), &[2.0]);
    }

    #[test]
    fn pyramid_needs_even_extents() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 6));
        assert!(image_pyramid(&t, 3).is_err());
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!(w.alpha, vec![0.3, 0.06, 0.08, 0.1, 0.12, 0.14, 0.2]);
        assert_eq!(w.gamma, 1e-6);
        w.validate().unwrap();
        let bad = LossWeights {
            alpha: vec![0.1, -1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_level_is_an_error() {
        let mut g = Graph::<f64>::new();
        let img = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        let frames = FramePyramids::new(&mut g, &img, &img, 3).unwrap();
        let f = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let flows = LevelFlows::new(vec![f]);
        let w = LossWeights {
            alpha: vec![1.0, 1.0, 1.0],
            ..Default::default()
        };
        assert!(matches!(
            training_loss(&mut g, &flows, &frames, &w),
            Err(Error::MissingLevel(2))
        ));
    }
}
