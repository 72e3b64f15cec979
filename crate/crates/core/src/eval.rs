//! Inference at full resolution and the reconstruction L1 metric.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::graph::Graph;
use crate::kernels::backwarp_forward;
use crate::kitti::network_input;
use crate::model::FlowModel;
use crate::params::ParameterStore;
use crate::projection::{ProjectionConfig, RangeImage};
use crate::tensor::{Shape, Tensor};

/// Anything producing a full-resolution flow for a pair of padded,
/// normalized `(1, 1, H, W)` frames.
pub trait FlowPredictor: Sync {
    fn predict(&self, frame1: &Tensor<f32>, frame2: &Tensor<f32>) -> Result<FlowField>;

    /// Extents the inputs must be divisible by.
    fn size_multiple(&self) -> usize {
        1
    }
}

pub struct ModelPredictor<'a> {
    pub model: &'a FlowModel,
    pub params: &'a ParameterStore<f32>,
}

impl FlowPredictor for ModelPredictor<'_> {
    fn predict(&self, frame1: &Tensor<f32>, frame2: &Tensor<f32>) -> Result<FlowField> {
        let mut g = Graph::new();
        let a = g.constant(frame1.clone());
        let b = g.constant(frame2.clone());
        let flows = self.model.forward(&mut g, self.params, a, b)?;
        FlowField::new(g.value(flows.level(1)?).clone())
    }

    fn size_multiple(&self) -> usize {
        self.model.config().size_multiple()
    }
}

/// The identity baseline.
pub struct ZeroFlow;

impl FlowPredictor for ZeroFlow {
    fn predict(&self, frame1: &Tensor<f32>, _: &Tensor<f32>) -> Result<FlowField> {
        let s = frame1.shape();
        Ok(FlowField::zeros(s.n, s.h, s.w))
    }
}

/// Full-resolution flow from `frame1` to `frame2` in pixels. Frames are
/// padded for the network and the flow cropped back to the frame extents.
pub fn infer(
    predictor: &dyn FlowPredictor,
    frame1: &RangeImage,
    frame2: &RangeImage,
    projection: &ProjectionConfig,
) -> Result<FlowField> {
    let (h, w) = (frame1.height(), frame1.width());
    if (frame2.height(), frame2.width()) != (h, w) {
        return Err(Error::shape(
            "infer",
            "frame2",
            format!("(1, 1, {h}, {w})"),
            Shape::new(1, 1, frame2.height(), frame2.width()),
        ));
    }
    let m = predictor.size_multiple();
    let a = network_input(frame1, projection, m)?;
    let b = network_input(frame2, projection, m)?;
    predictor.predict(&a, &b)?.crop(h, w)
}

/// Mean `|backwarp(I2, flow) - I1|` in meters over pixels where `I1` has a
/// return; 0 when it has none.
pub fn reconstruction_l1(
    frame1: &RangeImage,
    frame2: &RangeImage,
    flow: &FlowField,
) -> Result<f64> {
    let rec = backwarp_forward(&frame2.to_tensor(), flow.tensor())?;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for ((&r, &i1), &occ) in rec
        .data()
        .iter()
        .zip(frame1.ranges())
        .zip(frame1.occupancy())
    {
        if occ {
            sum += (r as f64 - i1 as f64).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Model L1 per pair, meters.
    pub per_frame_l1: Vec<f64>,
    pub mean_l1: f64,
    /// Zero-flow L1 per pair on the same pixels.
    pub per_frame_baseline_l1: Vec<f64>,
    pub baseline_mean_l1: f64,
    pub param_count: usize,
    pub frame_count: usize,
}

impl EvalReport {
    /// `1 - mean / baseline`: the fraction of the identity error removed.
    pub fn improvement(&self) -> f64 {
        if self.baseline_mean_l1 > 0.0 {
            1.0 - self.mean_l1 / self.baseline_mean_l1
        } else {
            0.0
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Evaluates every pair in parallel; the means are reduced in pair order.
pub fn eval_l1(
    predictor: &dyn FlowPredictor,
    pairs: &[(RangeImage, RangeImage)],
    projection: &ProjectionConfig,
    param_count: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("test".to_string()));
    }
    let rows: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(a, b)| {
            let flow = infer(predictor, a, b, projection)?;
            let zero = FlowField::zeros(1, a.height(), a.width());
            Ok((
                reconstruction_l1(a, b, &flow)?,
                reconstruction_l1(a, b, &zero)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (per_frame_l1, per_frame_baseline_l1): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    Ok(EvalReport {
        mean_l1: mean(&per_frame_l1),
        baseline_mean_l1: mean(&per_frame_baseline_l1),
        frame_count: per_frame_l1.len(),
        per_frame_l1,
        per_frame_baseline_l1,
        param_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_offset_is_one_meter() {
        let a = RangeImage::from_ranges(2, 2, vec![5.0, 0.0, 7.0, 9.0]).unwrap();
        let b = RangeImage::from_ranges(2, 2, vec![6.0, 3.0, 8.0, 10.0]).unwrap();
        let l1 = reconstruction_l1(&a, &b, &FlowField::zeros(1, 2, 2)).unwrap();
        assert_eq!(l1, 1.0);
    }

    #[test]
    fn empty_test_set() {
        let r = eval_l1(&ZeroFlow, &[], &ProjectionConfig::default(), 0);
        assert!(matches!(r, Err(Error::EmptyDataset(_))));
    }
}
