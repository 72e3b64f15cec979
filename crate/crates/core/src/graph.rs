//! Wengert tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; [`Graph::backward`]
//! walks the tape in reverse and deposits parameter gradients into the
//! [`ParameterStore`] the parameters were bound from.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, conv, pool, sample, ConvGeometry, PoolAxis, PoolKind};
use crate::params::ParameterStore;
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub const LEAKY: Activation = Activation::LeakyRelu(0.1);

    pub fn apply<T: Real>(&self, x: T) -> T {
        match *self {
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(slope)
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Pool {
        input: Var,
        axis: PoolAxis,
        argmax: Option<Vec<usize>>,
    },
    Upsample2x {
        input: Var,
    },
    AvgPool2 {
        input: Var,
    },
    Backwarp {
        source: Var,
        flow: Var,
    },
    Correlation {
        f1: Var,
        f2: Var,
        max_disp: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    /// `a * b` with `b` broadcast over its unit extents.
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Square {
        input: Var,
    },
    /// Square root with a zero subgradient at zero.
    Sqrt {
        input: Var,
    },
    Sum {
        input: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Recorded forward computation.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named parameter; repeated binds of one name share a node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let mut value = store.require(name)?.clone();
        value.clear_grad();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = self.value(input).map(|x| kind.apply(x));
        let rg = self.rg(input);
        self.push(out, Op::Act { input, kind }, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        self.activation(input, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn pool(&mut self, input: Var, axis: PoolAxis, kind: PoolKind) -> Var {
        let (out, argmax) = kernels::pool_forward(self.value(input), axis, kind);
        let rg = self.rg(input);
        self.push(
            out,
            Op::Pool {
                input,
                axis,
                argmax,
            },
            rg,
        )
    }

    pub fn upsample2x(&mut self, input: Var) -> Var {
        let out = kernels::upsample2x_forward(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Upsample2x { input }, rg)
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let out = kernels::avg_pool2_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::AvgPool2 { input }, rg))
    }

    pub fn backwarp(&mut self, source: Var, flow: Var) -> Result<Var> {
        let out = kernels::backwarp_forward(self.value(source), self.value(flow))?;
        let rg = self.rg(source) || self.rg(flow);
        Ok(self.push(out, Op::Backwarp { source, flow }, rg))
    }

    pub fn correlation(&mut self, f1: Var, f2: Var, max_disp: usize) -> Result<Var> {
        let out = kernels::correlation_forward(self.value(f1), self.value(f2), max_disp)?;
        let rg = self.rg(f1) || self.rg(f2);
        Ok(self.push(out, Op::Correlation { f1, f2, max_disp }, rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(
            *inputs
                .first()
                .ok_or_else(|| Error::Config("concat needs at least one input".to_string()))?,
        );
        let mut c = 0;
        for &v in inputs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(
                    "concat",
                    "input",
                    format!("({}, _, {}, {})", first.n, first.h, first.w),
                    s,
                ));
            }
            c += s.c;
        }
        let shape = first.with_c(c);
        let plane = shape.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape().c * plane;
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, "b", sa.to_string(), sb));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(s, data)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(s, data)?, Op::Sub { a, b }, rg))
    }

    /// Elementwise product; each extent of `b` must equal `a`'s or be 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let compatible = sa
            .dims()
            .iter()
            .zip(sb.dims())
            .all(|(&da, db)| db == da || db == 1);
        if !compatible {
            return Err(Error::shape(
                "mul",
                "b",
                format!("extents equal to {sa} or 1"),
                sb,
            ));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(sa.numel());
        for_each_broadcast(sa, sb, |ia, ib| data.push(va.data()[ia] * vb.data()[ib]));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(sa, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(input).map(|x| x * f);
        let rg = self.rg(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| x * x);
        let rg = self.rg(input);
        self.push(out, Op::Square { input }, rg)
    }

    pub fn sqrt(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| x.max(T::zero()).sqrt());
        let rg = self.rg(input);
        self.push(out, Op::Sqrt { input }, rg)
    }

    /// Sum of all elements, as a `1x1x1x1` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, rg)
    }

    /// Back-propagates from the scalar `loss`, adding `d loss / d param`
    /// into each bound parameter's gradient slot in `store`.
    ///
    /// Parameters the loss does not reach still get a (zero) gradient slot.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore<T>) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoGraph);
        }
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(Error::NotScalar(ls));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        store
                            .get_mut(name)
                            .ok_or_else(|| Error::MissingParameter(name.clone()))?
                            .accumulate_grad(&g);
                    }
                }
                &Op::Conv {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need = (
                        self.rg(input),
                        self.rg(weight),
                        bias.is_some_and(|b| self.rg(b)),
                    );
                    let cg = conv::conv2d_backward(
                        self.value(input),
                        self.value(weight),
                        geom,
                        &g,
                        need,
                    )?;
                    deposit(&mut grads, input, cg.input);
                    deposit(&mut grads, weight, cg.weight);
                    if let Some(b) = bias {
                        deposit(&mut grads, b, cg.bias);
                    }
                }
                &Op::Act { input, kind } => {
                    let d: Vec<T> = match kind {
                        Activation::LeakyRelu(slope) => {
                            let slope = T::lit(slope);
                            self.value(input)
                                .data()
                                .iter()
                                .zip(&g)
                                .map(|(&x, &gv)| if x > T::zero() { gv } else { gv * slope })
                                .collect()
                        }
                        Activation::Sigmoid => node
                            .value
                            .data()
                            .iter()
                            .zip(&g)
                            .map(|(&y, &gv)| gv * y * (T::one() - y))
                            .collect(),
                    };
                    deposit(&mut grads, input, Some(d));
                }
                Op::Pool {
                    input,
                    axis,
                    argmax,
                } => {
                    let d = pool::pool_backward(self.shape(*input), *axis, argmax.as_deref(), &g);
                    deposit(&mut grads, *input, Some(d));
                }
                &Op::Upsample2x { input } => {
                    let d = sample::upsample2x_backward(self.shape(input), &g);
                    deposit(&mut grads, input, Some(d));
                }
                &Op::AvgPool2 { input } => {
                    let d = pool::avg_pool2_backward(self.shape(input), &g);
                    deposit(&mut grads, input, Some(d));
                }
                &Op::Backwarp { source, flow } => {
                    let (ds, df) = sample::backwarp_backward(
                        self.value(source),
                        self.value(flow),
                        &g,
                        self.rg(source),
                        self.rg(flow),
                    );
                    deposit(&mut grads, source, ds);
                    deposit(&mut grads, flow, df);
                }
                &Op::Correlation { f1, f2, max_disp } => {
                    let (d1, d2) = kernels::correlation_backward(
                        self.value(f1),
                        self.value(f2),
                        max_disp,
                        &g,
                        (self.rg(f1), self.rg(f2)),
                    );
                    deposit(&mut grads, f1, d1);
                    deposit(&mut grads, f2, d2);
                }
                Op::Concat { inputs } => {
                    let s = node.value.shape();
                    let plane = s.plane();
                    let mut parts: Vec<Vec<T>> = inputs
                        .iter()
                        .map(|&v| Vec::with_capacity(self.value(v).numel()))
                        .collect();
                    let mut off = 0;
                    for _ in 0..s.n {
                        for (k, &v) in inputs.iter().enumerate() {
                            let len = self.shape(v).c * plane;
                            parts[k].extend_from_slice(&g[off..off + len]);
                            off += len;
                        }
                    }
                    for (&v, d) in inputs.iter().zip(parts) {
                        if self.rg(v) {
                            deposit(&mut grads, v, Some(d));
                        }
                    }
                }
                &Op::Add { a, b } => {
                    if self.rg(a) {
                        deposit(&mut grads, a, Some(g.clone()));
                    }
                    if self.rg(b) {
                        deposit(&mut grads, b, Some(g));
                    }
                }
                &Op::Sub { a, b } => {
                    if self.rg(b) {
                        deposit(&mut grads, b, Some(g.iter().map(|&x| -x).collect()));
                    }
                    if self.rg(a) {
                        deposit(&mut grads, a, Some(g));
                    }
                }
                &Op::Mul { a, b } => {
                    let (sa, sb) = (self.shape(a), self.shape(b));
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    let mut da = self.rg(a).then(|| Vec::with_capacity(sa.numel()));
                    let mut db = self.rg(b).then(|| vec![T::zero(); sb.numel()]);
                    let mut k = 0;
                    for_each_broadcast(sa, sb, |ia, ib| {
                        if let Some(da) = &mut da {
                            da.push(g[k] * vb[ib]);
                        }
                        if let Some(db) = &mut db {
                            db[ib] += g[k] * va[ia];
                        }
                        k += 1;
                    });
                    deposit(&mut grads, a, da);
                    deposit(&mut grads, b, db);
                }
                &Op::Scale { input, factor } => {
                    let f = T::lit(factor);
                    deposit(&mut grads, input, Some(g.iter().map(|&x| x * f).collect()));
                }
                &Op::Square { input } => {
                    let two = T::lit(2.0);
                    let d = self
                        .value(input)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| two * x * gv)
                        .collect();
                    deposit(&mut grads, input, Some(d));
                }
                &Op::Sqrt { input } => {
                    let half = T::lit(0.5);
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| {
                            if y > T::zero() {
                                gv * half / y
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    deposit(&mut grads, input, Some(d));
                }
                &Op::Sum { input } => {
                    let d = vec![g[0]; self.value(input).numel()];
                    deposit(&mut grads, input, Some(d));
                }
            }
        }
        for (_, t) in store.iter_mut() {
            t.ensure_grad();
        }
        Ok(())
    }
}

fn deposit<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Option<Vec<T>>) {
    let Some(delta) = delta else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
        slot @ None => *slot = Some(delta),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

/// Visits `(flat index into a, flat index into broadcast b)` in `a`'s order.
fn for_each_broadcast(sa: Shape, sb: Shape, mut f: impl FnMut(usize, usize)) {
    let pick = |da: usize, db: usize, i: usize| if db == 1 && da != 1 { 0 } else { i };
    let mut ia = 0;
    for n in 0..sa.n {
        let bn = pick(sa.n, sb.n, n);
        for c in 0..sa.c {
            let bc = pick(sa.c, sb.c, c);
            for y in 0..sa.h {
                let by = pick(sa.h, sb.h, y);
                let row = ((bn * sb.c + bc) * sb.h + by) * sb.w;
                if sb.w == sa.w {
                    for x in 0..sa.w {
                        f(ia, row + x);
                        ia += 1;
                    }
                } else {
                    for _ in 0..sa.w {
                        f(ia, row);
                        ia += 1;
                    }
                }
            }
        }
    }
}
