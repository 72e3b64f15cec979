//! Reconstruction L1 and inference plumbing with hand-computed answers.

use lidarflow::eval::{eval_l1, infer, reconstruction_l1, FlowPredictor, ModelPredictor, ZeroFlow};
use lidarflow::{
    FlowField, FlowModel, ModelConfig, ProjectionConfig, RangeImage, Result, Shape, Tensor,
};

/// Predicts a constant horizontal flow and checks the padded input size.
struct Constant {
    u: f32,
    multiple: usize,
}

impl FlowPredictor for Constant {
    fn predict(&self, a: &Tensor<f32>, _: &Tensor<f32>) -> Result<FlowField> {
        let s = a.shape();
        assert_eq!((s.h % self.multiple, s.w % self.multiple), (0, 0));
        Ok(FlowField::uniform(1, s.h, s.w, self.u, 0.0))
    }

    fn size_multiple(&self) -> usize {
        self.multiple
    }
}

/// `frame2(x) = frame1(x - 2)`, so the true flow is `u = +2`.
fn shifted_pair() -> (RangeImage, RangeImage) {
    let (h, w) = (3, 10);
    let r1: Vec<f32> = (0..h * w).map(|i| 1.0 + (i % 7) as f32).collect();
    let r2: Vec<f32> = (0..h * w)
        .map(|i| if i % w < 2 { 4.0 } else { r1[i - 2] })
        .collect();
    (
        RangeImage::from_ranges(h, w, r1).unwrap(),
        RangeImage::from_ranges(h, w, r2).unwrap(),
    )
}

#[test]
fn true_flow_leaves_only_the_border() {
    let (a, b) = shifted_pair();
    let flow = FlowField::uniform(1, 3, 10, 2.0, 0.0);
    // The last two columns sample outside frame 2 and read zero.
    let border: f64 = (0..3).flat_map(|y| [8, 9].map(|x| a.at(y, x) as f64)).sum();
    let l1 = reconstruction_l1(&a, &b, &flow).unwrap();
    assert!((l1 - border / 30.0).abs() < 1e-12);
}

#[test]
fn report_compares_with_the_identity() {
    let (a, b) = shifted_pair();
    let proj = ProjectionConfig::default();
    let pairs = vec![(a.clone(), b.clone()), (b.clone(), a.clone())];
    let right = eval_l1(
        &Constant {
            u: 2.0,
            multiple: 4,
        },
        &pairs[..1],
        &proj,
        7,
    )
    .unwrap();
    assert!(right.improvement() > 0.2);
    assert_eq!(right.param_count, 7);
    let zero = eval_l1(&ZeroFlow, &pairs, &proj, 0).unwrap();
    assert_eq!(zero.per_frame_l1, zero.per_frame_baseline_l1);
    assert_eq!(zero.improvement(), 0.0);
    assert_eq!(zero.frame_count, 2);
    let want = (zero.per_frame_l1[0] + zero.per_frame_l1[1]) / 2.0;
    assert!((zero.mean_l1 - want).abs() < 1e-15);
    let json: serde_json::Value = serde_json::to_value(&zero).unwrap();
    assert_eq!(json["frame_count"], 2);
    assert!(json["per_frame_baseline_l1"].is_array());
}

#[test]
fn inference_crops_back_to_the_frame() {
    let (a, b) = shifted_pair();
    let proj = ProjectionConfig::default();
    let flow = infer(
        &Constant {
            u: 1.5,
            multiple: 8,
        },
        &a,
        &b,
        &proj,
    )
    .unwrap();
    assert_eq!(flow.shape(), Shape::new(1, 2, 3, 10));
    assert!(flow.u(0).iter().all(|&u| u == 1.5));
    let wrong = RangeImage::empty(3, 11);
    assert!(infer(&ZeroFlow, &a, &wrong, &proj).is_err());
}

#[test]
fn model_predictor_runs_on_unpadded_frames() {
    let model = FlowModel::new(ModelConfig::narrow()).unwrap();
    let params = model.init_params(0);
    let p = ModelPredictor {
        model: &model,
        params: &params,
    };
    let a = RangeImage::from_ranges(40, 100, (0..4000).map(|i| (i % 50) as f32).collect()).unwrap();
    let flow = infer(&p, &a, &a, &ProjectionConfig::default()).unwrap();
    assert_eq!(flow.shape(), Shape::new(1, 2, 40, 100));
    assert!(flow.tensor().data().iter().all(|v| v.is_finite()));
}
