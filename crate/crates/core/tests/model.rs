//! Network structure: output shapes, attention gates, sharing and gradient
//! coverage.

use lidarflow::loss::{training_loss, FramePyramids, LossWeights};
use lidarflow::synthetic::texture_tensor;
use lidarflow::{Error, FlowModel, Graph, ModelConfig, ParameterStore, Shape, Tensor};
use proptest::prelude::*;

fn zero_out(store: &mut ParameterStore, prefix: &str) {
    for (name, t) in store.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().fill(0.0);
        }
    }
}

#[test]
fn flow_shapes_at_kitti_resolution() {
    let model = FlowModel::new(ModelConfig::default()).unwrap();
    let store = model.init_params(0);
    let mut g = Graph::new();
    let a = g.constant(texture_tensor(64, 1024, 1));
    let b = g.constant(texture_tensor(64, 1024, 2));
    let flows = model.forward(&mut g, &store, a, b).unwrap();
    assert_eq!(flows.len(), 7);
    for (level, f) in flows.iter() {
        let s = 1 << (level - 1);
        assert_eq!(
            g.shape(f),
            Shape::new(1, 2, 64 / s, 1024 / s),
            "level {level}"
        );
        g.value(f).validate().unwrap();
    }
}

#[test]
fn indivisible_input_is_rejected() {
    let model = FlowModel::new(ModelConfig::narrow()).unwrap();
    let store = model.init_params(0);
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(Shape::new(1, 1, 60, 128)));
    let e = model.forward(&mut g, &store, a, a).unwrap_err();
    assert!(
        matches!(e, Error::IndivisibleExtent { multiple: 64, .. }),
        "{e}"
    );
}

#[test]
fn cost_volume_of_identical_features() {
    // Zero flow and f1 == f2: the centre channel is the per-pixel mean square.
    let model = FlowModel::new(ModelConfig::default()).unwrap();
    let f = Tensor::from_fn(Shape::new(1, 3, 5, 6), |_, c, y, x| {
        ((c * 5 + y * 3 + x) as f32 * 0.7).cos()
    });
    let mut g = Graph::new();
    let v = g.constant(f.clone());
    let (cv, _) = model.cost_volume(&mut g, v, v, None).unwrap();
    let cv = g.value(cv);
    assert_eq!(cv.shape().c, 81);
    for y in 0..5 {
        for x in 0..6 {
            let want: f32 = (0..3).map(|c| f.at(0, c, y, x).powi(2)).sum::<f32>() / 3.0;
            assert!((cv.at(0, 40, y, x) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_context_output_leaves_flow_unchanged() {
    let model = FlowModel::new(ModelConfig::narrow()).unwrap();
    let mut store = model.init_params(3);
    zero_out(&mut store, "context.conv7");
    let mut g = Graph::new();
    let feats = texture_tensor(8, 64, 4)
        .reshape(Shape::new(1, 4, 8, 16))
        .unwrap();
    let penult = g.constant(feats.map(|v| v - 0.5));
    let flow_t = Tensor::from_fn(Shape::new(1, 2, 8, 16), |_, c, y, x| {
        (c + y + x) as f32 * 0.1
    });
    let flow = g.constant(flow_t.clone());
    let out = model.context_refine(&mut g, &store, penult, flow).unwrap();
    assert_eq!(g.value(out), &flow_t);
}

#[test]
fn estimator_and_context_are_shared_across_levels() {
    // One residual tensor serves every level: silencing it zeroes all flows.
    let model = FlowModel::new(ModelConfig::narrow()).unwrap();
    let mut store = model.init_params(5);
    zero_out(&mut store, "estimator.conv6");
    zero_out(&mut store, "context.conv7");
    let mut g = Graph::new();
    let a = g.constant(texture_tensor(64, 128, 1));
    let b = g.constant(texture_tensor(64, 128, 2));
    let flows = model.forward(&mut g, &store, a, b).unwrap();
    for (level, f) in flows.iter() {
        assert!(g.value(f).data().iter().all(|&v| v == 0.0), "level {level}");
    }
    let names: Vec<String> = model.param_specs().into_iter().map(|s| s.name).collect();
    assert!(names
        .iter()
        .filter(|n| n.starts_with("estimator.") || n.starts_with("context."))
        .all(|n| !n.contains(".l")));
}

#[test]
fn every_parameter_receives_gradient() {
    for use_cbam in [true, false] {
        let model = FlowModel::new(ModelConfig {
            use_cbam,
            ..ModelConfig::narrow()
        })
        .unwrap();
        let mut store = model.init_params(7);
        let (a, b) = (texture_tensor(64, 128, 8), texture_tensor(64, 128, 9));
        let mut g = Graph::new();
        let x1 = g.constant(a.clone());
        let x2 = g.constant(b.clone());
        let flows = model.forward(&mut g, &store, x1, x2).unwrap();
        let frames = FramePyramids::new(&mut g, &a, &b, 7).unwrap();
        let loss = training_loss(&mut g, &flows, &frames, &LossWeights::default()).unwrap();
        g.backward(loss.total, &mut store).unwrap();
        for (name, t) in store.iter() {
            let grad = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "{name} gradient is all zero"
            );
            assert!(
                grad.iter().all(|v| v.is_finite()),
                "{name} gradient not finite"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // In f64 so that the sigmoid cannot round to exactly 0 or 1 at these
    // input scales.
    #[test]
    fn attention_gates_lie_strictly_inside_unit_interval(
        seed in any::<u64>(), level in 2usize..8, scale in 0.1f64..20.0,
    ) {
        let model = FlowModel::new(ModelConfig::narrow()).unwrap();
        let store = model.init_params(seed).cast::<f64>();
        let c = model.config().pyramid_channels[level - 1];
        let x = texture_tensor(6, 10 * c, seed).reshape(Shape::new(1, c, 6, 10)).unwrap();
        let x = x.cast::<f64>().map(|v| (v - 0.5) * scale);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (mc, _) = model.channel_attention(&mut g, &store, level, xv).unwrap();
        let ms = model.spatial_attention(&mut g, &store, level, xv).unwrap();
        prop_assert_eq!(g.shape(mc), Shape::new(1, c, 1, 1));
        prop_assert_eq!(g.shape(ms), Shape::new(1, 1, 6, 10));
        for &v in g.value(mc).data().iter().chain(g.value(ms).data()) {
            prop_assert!(v > 0.0 && v < 1.0);
        }
        let out = model.cbam(&mut g, &store, level, xv).unwrap();
        for (&o, &i) in g.value(out).data().iter().zip(x.data()) {
            prop_assert!(o.abs() <= i.abs());
            prop_assert!(o == 0.0 || o.signum() == i.signum());
        }
    }
}
