//! Finite-difference oracles for every differentiable graph op, in f64.
//!
//! Each op is checked on several random small instances. The scalar under
//! test is `sum(op(inputs) * R)` for a fixed random `R`, so every output
//! element carries a distinct weight. Inputs are drawn away from the op's
//! non-differentiable points.

use lidarflow::gradcheck::{all_coordinates, check, GradCheckConfig};
use lidarflow::kernels::{ConvGeometry, PoolAxis, PoolKind};
use lidarflow::{Graph, ParameterStore, Result, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;
pub const INSTANCES: u64 = 5;

/// Largest relative error seen for one op on one instance.
#[derive(Clone, Debug)]
pub struct Worst {
    pub op: &'static str,
    pub rel_error: f64,
    pub detail: String,
}

pub type Checks = Vec<Worst>;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Uniform in `[-1, -margin] U [margin, 1]`.
fn away_from_zero(shape: Shape, margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A random permutation of evenly spaced values: no ties, gaps of `1/numel`.
fn distinct(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 - 0.5).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).unwrap()
}

/// Flow whose sample positions stay at least 0.1 px from the integer grid,
/// where bilinear sampling is not differentiable; some point outside.
fn smooth_flow(shape: Shape, span: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let whole = rng.gen_range(-span..span).round();
        whole + rng.gen_range(0.1..0.9)
    })
}

/// Checks `op` with respect to every coordinate of every input.
fn verify<F>(
    out: &mut Checks,
    what: &'static str,
    inputs: Vec<(&str, Tensor<f64>)>,
    rng: &mut ChaCha8Rng,
    op: F,
) where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParameterStore::new();
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    for (n, t) in inputs {
        store.insert(n, t);
    }
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = names.iter().map(|n| g.param(&store, n).unwrap()).collect();
        let out = op(&mut g, &vars).unwrap();
        g.shape(out)
    };
    let weights = random(out_shape, rng);
    let probes = all_coordinates(&store);
    let report = check(
        &mut store,
        |g, s| {
            let vars: Vec<Var> = names.iter().map(|n| g.param(s, n)).collect::<Result<_>>()?;
            let out = op(g, &vars)?;
            let r = g.constant(weights.clone());
            let prod = g.mul(out, r)?;
            Ok(g.sum(prod))
        },
        &probes,
        GradCheckConfig::default(),
    )
    .unwrap();
    let p = report.worst().expect("at least one coordinate");
    out.push(Worst {
        op: what,
        rel_error: p.rel_error,
        detail: format!(
            "{}[{}] analytic {:e} numeric {:e}",
            p.name, p.index, p.analytic, p.numeric
        ),
    });
}

fn rng(tag: u64, instance: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tag * 1000 + instance)
}

pub fn conv2d() -> Checks {
    let mut out = Checks::new();
    let geoms = [
        (3, ConvGeometry::new(1, 1, 1)),
        (3, ConvGeometry::new(2, 1, 1)),
        (3, ConvGeometry::new(1, 2, 2)),
        (1, ConvGeometry::new(1, 0, 1)),
        (7, ConvGeometry::new(1, 3, 1)),
    ];
    for i in 0..INSTANCES {
        let mut r = rng(1, i);
        let (k, geom) = geoms[i as usize];
        let (cin, cout) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = random(Shape::new(2, cin, 6, 7), &mut r);
        let w = random(Shape::new(cout, cin, k, k), &mut r);
        let b = random(Shape::new(cout, 1, 1, 1), &mut r);
        verify(
            &mut out,
            "conv2d",
            vec![("x", x), ("w", w), ("b", b)],
            &mut r,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), geom),
        );
    }
    for i in 0..INSTANCES {
        let mut r = rng(2, i);
        let x = random(Shape::new(1, 2, 5, 5), &mut r);
        let w = random(Shape::new(3, 2, 3, 3), &mut r);
        verify(
            &mut out,
            "conv2d (no bias)",
            vec![("x", x), ("w", w)],
            &mut r,
            |g, v| g.conv2d(v[0], v[1], None, ConvGeometry::same3(1)),
        );
    }
    out
}

pub fn activations() -> Checks {
    let mut out = Checks::new();
    for i in 0..INSTANCES {
        let mut r = rng(3, i);
        let x = away_from_zero(Shape::new(2, 3, 4, 4), 1e-2, &mut r);
        verify(&mut out, "leaky_relu", vec![("x", x)], &mut r, |g, v| {
            Ok(g.leaky_relu(v[0], 0.1))
        });
    }
    for i in 0..INSTANCES {
        let mut r = rng(4, i);
        let x = random(Shape::new(1, 3, 4, 5), &mut r).map(|v| 4.0 * v);
        verify(&mut out, "sigmoid", vec![("x", x)], &mut r, |g, v| {
            Ok(g.sigmoid(v[0]))
        });
    }
    out
}

pub fn pools() -> Checks {
    let mut out = Checks::new();
    let modes = [
        ("spatial avg pool", PoolAxis::Spatial, PoolKind::Avg),
        ("spatial max pool", PoolAxis::Spatial, PoolKind::Max),
        ("channel avg pool", PoolAxis::Channel, PoolKind::Avg),
        ("channel max pool", PoolAxis::Channel, PoolKind::Max),
    ];
    for (what, axis, kind) in modes {
        for i in 0..INSTANCES {
            let mut r = rng(5, i);
            let x = distinct(Shape::new(2, 4, 3, 5), &mut r);
            verify(&mut out, what, vec![("x", x)], &mut r, |g, v| {
                Ok(g.pool(v[0], axis, kind))
            });
        }
    }
    for i in 0..INSTANCES {
        let mut r = rng(7, i);
        let x = random(Shape::new(2, 2, 4, 6), &mut r);
        verify(&mut out, "avg_pool2", vec![("x", x)], &mut r, |g, v| {
            g.avg_pool2(v[0])
        });
    }
    out
}

pub fn sampling() -> Checks {
    let mut out = Checks::new();
    for i in 0..INSTANCES {
        let mut r = rng(6, i);
        let x = random(Shape::new(1, 2, 3 + i as usize % 2, 4), &mut r);
        verify(&mut out, "upsample2x", vec![("x", x)], &mut r, |g, v| {
            Ok(g.upsample2x(v[0]))
        });
    }
    for i in 0..INSTANCES {
        let mut r = rng(8, i);
        let src = random(Shape::new(2, 2, 5, 6), &mut r);
        let flow = smooth_flow(Shape::new(2, 2, 5, 6), 3.0, &mut r);
        verify(
            &mut out,
            "backwarp",
            vec![("src", src), ("flow", flow)],
            &mut r,
            |g, v| g.backwarp(v[0], v[1]),
        );
    }
    out
}

pub fn correlation() -> Checks {
    let mut out = Checks::new();
    for i in 0..INSTANCES {
        let mut r = rng(9, i);
        let s = Shape::new(1, 3, 4 + i as usize % 3, 5);
        let (a, b) = (random(s, &mut r), random(s, &mut r));
        let radius = 1 + i as usize % 3;
        verify(
            &mut out,
            "correlation",
            vec![("a", a), ("b", b)],
            &mut r,
            move |g, v| g.correlation(v[0], v[1], radius),
        );
    }
    out
}

pub fn structural() -> Checks {
    let mut out = Checks::new();
    for i in 0..INSTANCES {
        let mut r = rng(10, i);
        let a = random(Shape::new(2, 1, 3, 3), &mut r);
        let b = random(Shape::new(2, 3, 3, 3), &mut r);
        verify(
            &mut out,
            "concat",
            vec![("a", a), ("b", b)],
            &mut r,
            |g, v| g.concat(&[v[1], v[0], v[1]]),
        );
    }
    out
}

pub fn arithmetic() -> Checks {
    let mut out = Checks::new();
    for i in 0..INSTANCES {
        let mut r = rng(11, i);
        let s = Shape::new(2, 2, 3, 4);
        let (a, b) = (random(s, &mut r), random(s, &mut r));
        let pair = || vec![("a", a.clone()), ("b", b.clone())];
        verify(&mut out, "add", pair(), &mut r, |g, v| g.add(v[0], v[1]));
        verify(&mut out, "sub", pair(), &mut r, |g, v| g.sub(v[0], v[1]));
        verify(&mut out, "mul", pair(), &mut r, |g, v| g.mul(v[0], v[1]));
        verify(&mut out, "scale", vec![("a", a.clone())], &mut r, |g, v| {
            Ok(g.scale(v[0], -2.5))
        });
        verify(
            &mut out,
            "square",
            vec![("a", a.clone())],
            &mut r,
            |g, v| Ok(g.square(v[0])),
        );
    }
    let gates = [
        Shape::new(2, 3, 1, 1),
        Shape::new(2, 1, 4, 5),
        Shape::new(1, 1, 1, 1),
        Shape::new(1, 3, 4, 5),
        Shape::new(2, 1, 1, 5),
    ];
    for (i, gate) in gates.into_iter().enumerate() {
        let mut r = rng(12, i as u64);
        let a = random(Shape::new(2, 3, 4, 5), &mut r);
        let b = random(gate, &mut r);
        verify(
            &mut out,
            "broadcast mul",
            vec![("a", a), ("b", b)],
            &mut r,
            |g, v| g.mul(v[0], v[1]),
        );
    }
    for i in 0..INSTANCES {
        let mut r = rng(13, i);
        let x = random(Shape::new(1, 2, 3, 3), &mut r).map(|v| 0.2 + v.abs());
        verify(&mut out, "sqrt", vec![("x", x.clone())], &mut r, |g, v| {
            Ok(g.sqrt(v[0]))
        });
        verify(&mut out, "sum", vec![("x", x)], &mut r, |g, v| {
            Ok(g.sum(v[0]))
        });
    }
    out
}

/// Every op check, in a fixed order.
pub fn all() -> Checks {
    [
        conv2d,
        activations,
        pools,
        sampling,
        correlation,
        structural,
        arithmetic,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
