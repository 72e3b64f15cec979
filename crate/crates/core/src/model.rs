//! Coarse-to-fine flow network.
//!
//! A shared feature pyramid encodes both frames; each level's features are
//! refined by a channel-then-spatial attention block. From the coarsest level
//! down, the second frame's features are warped by the upsampled coarser
//! flow, correlated with the first frame's, and a flow estimator shared by
//! all levels predicts a residual update that a dilated context network
//! (also shared) refines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{correlation_channels, ConvGeometry, PoolAxis, PoolKind};
use crate::params::ParameterStore;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature channels per pyramid level; entry 0 is the input image.
    pub pyramid_channels: Vec<usize>,
    pub estimator_channels: Vec<usize>,
    pub context_channels: Vec<usize>,
    pub context_dilations: Vec<usize>,
    pub cost_radius: usize,
    pub adapter_channels: usize,
    pub leaky_slope: f64,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub use_cbam: bool,
    /// Refine with the context network at every level, not only the finest
    /// estimated one.
    pub context_every_level: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pyramid_channels: vec![1, 16, 32, 64, 96, 128, 192],
            estimator_channels: vec![128, 128, 96, 64, 32, 2],
            context_channels: vec![128, 128, 128, 96, 64, 32, 2],
            context_dilations: vec![1, 2, 4, 8, 16, 1, 1],
            cost_radius: 4,
            adapter_channels: 32,
            leaky_slope: 0.1,
            cbam_reduction: 16,
            cbam_kernel: 7,
            use_cbam: true,
            context_every_level: true,
        }
    }
}

impl ModelConfig {
    /// The same topology at roughly one eighth of the channel widths.
    pub fn narrow() -> Self {
        Self {
            pyramid_channels: vec![1, 2, 4, 8, 12, 16, 24],
            estimator_channels: vec![16, 16, 12, 8, 4, 2],
            context_channels: vec![16, 16, 16, 12, 8, 4, 2],
            adapter_channels: 4,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.pyramid_channels.len()
    }

    /// Input extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn cost_channels(&self) -> usize {
        correlation_channels(self.cost_radius)
    }

    /// Channels entering the shared estimator: flow, adapted features, cost.
    pub fn estimator_input(&self) -> usize {
        2 + self.adapter_channels + self.cost_channels()
    }

    fn penultimate(&self) -> usize {
        self.estimator_channels[self.estimator_channels.len() - 2]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels() < 2 {
            return bad("the pyramid needs at least two levels");
        }
        if self.pyramid_channels.contains(&0) {
            return bad("pyramid channels must be positive");
        }
        if self.estimator_channels.len() < 2 || self.estimator_channels.last() != Some(&2) {
            return bad("the estimator needs at least two layers and must end in 2 channels");
        }
        if self.context_channels.last() != Some(&2) {
            return bad("the context network must end in 2 channels");
        }
        if self.context_channels.len() != self.context_dilations.len() {
            return bad("context channels and dilations must have equal length");
        }
        if self.context_dilations.contains(&0) || self.cbam_reduction == 0 {
            return bad("dilations and the attention reduction ratio must be positive");
        }
        if self.cbam_kernel.is_multiple_of(2) {
            return bad("the spatial attention kernel must have odd size");
        }
        Ok(())
    }

    /// Stable digest of every architectural field; checkpoints carry it to
    /// refuse loading weights into a different network.
    pub fn fingerprint(&self) -> u64 {
        let mut h = xxhash_rust::xxh3::Xxh3::new();
        for list in [
            &self.pyramid_channels,
            &self.estimator_channels,
            &self.context_channels,
            &self.context_dilations,
        ] {
            h.update(&(list.len() as u64).to_le_bytes());
            for &v in list {
                h.update(&(v as u64).to_le_bytes());
            }
        }
        for v in [
            self.cost_radius,
            self.adapter_channels,
            self.cbam_reduction,
            self.cbam_kernel,
            self.use_cbam as usize,
            self.context_every_level as usize,
        ] {
            h.update(&(v as u64).to_le_bytes());
        }
        h.update(&self.leaky_slope.to_bits().to_le_bytes());
        h.digest()
    }

    fn cbam_hidden(&self, channels: usize) -> usize {
        (channels / self.cbam_reduction).max(1)
    }
}

/// Name, shape and fan-in of one learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub fan_in: usize,
    pub is_bias: bool,
}

/// Flow fields for levels `1..=L`, each in its own level's pixel units.
#[derive(Clone, Debug)]
pub struct LevelFlows(Vec<Var>);

impl LevelFlows {
    pub fn new(levels: Vec<Var>) -> Self {
        Self(levels)
    }

    /// Flow at `level` (1 = full resolution).
    pub fn level(&self, level: usize) -> Result<Var> {
        level
            .checked_sub(1)
            .and_then(|i| self.0.get(i))
            .copied()
            .ok_or(Error::MissingLevel(level))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.0.iter().enumerate().map(|(i, &v)| (i + 1, v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    config: ModelConfig,
}

fn conv_spec(out: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: Shape::new(cout, cin, k, k),
        fan_in: cin * k * k,
        is_bias: false,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: Shape::new(cout, 1, 1, 1),
        fan_in: cin * k * k,
        is_bias: true,
    });
}

impl FlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every learnable tensor of the model, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let mut specs = Vec::new();
        for level in 2..=c.levels() {
            let (cin, cout) = (c.pyramid_channels[level - 2], c.pyramid_channels[level - 1]);
            conv_spec(&mut specs, &format!("pyramid.l{level}.conv1"), cout, cin, 3);
            conv_spec(
                &mut specs,
                &format!("pyramid.l{level}.conv2"),
                cout,
                cout,
                3,
            );
            if c.use_cbam {
                let hidden = c.cbam_hidden(cout);
                conv_spec(&mut specs, &format!("cbam.l{level}.mlp1"), hidden, cout, 1);
                conv_spec(&mut specs, &format!("cbam.l{level}.mlp2"), cout, hidden, 1);
                conv_spec(
                    &mut specs,
                    &format!("cbam.l{level}.spatial"),
                    1,
                    2,
                    c.cbam_kernel,
                );
            }
            conv_spec(
                &mut specs,
                &format!("adapter.l{level}"),
                c.adapter_channels,
                cout,
                1,
            );
        }
        let est = &c.estimator_channels;
        for (k, &cout) in est.iter().enumerate() {
            let cin = match k {
                0 => c.estimator_input(),
                1 => est[0],
                _ => est[k - 1] + est[k - 2],
            };
            conv_spec(
                &mut specs,
                &format!("estimator.conv{}", k + 1),
                cout,
                cin,
                3,
            );
        }
        let mut cin = c.penultimate() + 2;
        for (k, &cout) in c.context_channels.iter().enumerate() {
            conv_spec(&mut specs, &format!("context.conv{}", k + 1), cout, cin, 3);
            cin = cout;
        }
        specs
    }

    /// Fresh parameters: fan-in scaled uniform weights (He gain for the
    /// leaky ReLU), zero biases.
    pub fn init_params(&self, seed: u64) -> ParameterStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = self.config.leaky_slope;
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let mut store = ParameterStore::new();
        for spec in self.param_specs() {
            let t = if spec.is_bias {
                Tensor::zeros(spec.shape)
            } else {
                let bound = (gain * (3.0 / spec.fan_in as f64).sqrt()) as f32;
                let data = (0..spec.shape.numel())
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor::from_vec(spec.shape, data).expect("spec shape")
            };
            store.insert(spec.name, t);
        }
        store
    }

    fn conv<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        prefix: &str,
        input: Var,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let w = g.param(store, &format!("{prefix}.weight"))?;
        let b = g.param(store, &format!("{prefix}.bias"))?;
        g.conv2d(input, w, Some(b), geom)
    }

    fn conv_act<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        prefix: &str,
        input: Var,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let y = self.conv(g, store, prefix, input, geom)?;
        Ok(g.leaky_relu(y, self.config.leaky_slope))
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let m = self.config.size_multiple();
        if s.c != self.config.pyramid_channels[0] {
            return Err(Error::shape(
                "pyramid",
                "image",
                format!("(N, {}, H, W)", self.config.pyramid_channels[0]),
                s,
            ));
        }
        if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) {
            return Err(Error::IndivisibleExtent {
                height: s.h,
                width: s.w,
                multiple: m,
            });
        }
        Ok(())
    }

    /// Features for levels `2..=L` (index 0 is level 2).
    pub fn pyramid<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        image: Var,
    ) -> Result<Vec<Var>> {
        self.check_input(g.shape(image))?;
        let mut x = image;
        let mut out = Vec::with_capacity(self.config.levels() - 1);
        for level in 2..=self.config.levels() {
            x = self.conv_act(
                g,
                store,
                &format!("pyramid.l{level}.conv1"),
                x,
                ConvGeometry::new(2, 1, 1),
            )?;
            x = self.conv_act(
                g,
                store,
                &format!("pyramid.l{level}.conv2"),
                x,
                ConvGeometry::same3(1),
            )?;
            out.push(x);
        }
        Ok(out)
    }

    /// Channel attention followed by spatial attention.
    pub fn cbam<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        level: usize,
        x: Var,
    ) -> Result<Var> {
        let (mc, _) = self.channel_attention(g, store, level, x)?;
        let xc = g.mul(x, mc)?;
        let ms = self.spatial_attention(g, store, level, xc)?;
        g.mul(xc, ms)
    }

    /// Channel attention map `(N, C, 1, 1)` and the pooled descriptors.
    pub fn channel_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        level: usize,
        x: Var,
    ) -> Result<(Var, [Var; 2])> {
        let pointwise = ConvGeometry::new(1, 0, 1);
        let avg = g.pool(x, PoolAxis::Spatial, PoolKind::Avg);
        let max = g.pool(x, PoolAxis::Spatial, PoolKind::Max);
        let branch = |g: &mut Graph<T>, z: Var| -> Result<Var> {
            let h = self.conv_act(g, store, &format!("cbam.l{level}.mlp1"), z, pointwise)?;
            self.conv(g, store, &format!("cbam.l{level}.mlp2"), h, pointwise)
        };
        let a = branch(g, avg)?;
        let m = branch(g, max)?;
        let sum = g.add(a, m)?;
        Ok((g.sigmoid(sum), [avg, max]))
    }

    /// Spatial attention map `(N, 1, H, W)`.
    pub fn spatial_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        level: usize,
        x: Var,
    ) -> Result<Var> {
        let avg = g.pool(x, PoolAxis::Channel, PoolKind::Avg);
        let max = g.pool(x, PoolAxis::Channel, PoolKind::Max);
        let both = g.concat(&[avg, max])?;
        let pad = self.config.cbam_kernel / 2;
        let logits = self.conv(
            g,
            store,
            &format!("cbam.l{level}.spatial"),
            both,
            ConvGeometry::new(1, pad, 1),
        )?;
        Ok(g.sigmoid(logits))
    }

    /// Cost volume between `f1` and `f2` warped by `up_flow` (when given).
    ///
    /// Returns the leaky-rectified volume and the features it was built from.
    pub fn cost_volume<T: Real>(
        &self,
        g: &mut Graph<T>,
        f1: Var,
        f2: Var,
        up_flow: Option<Var>,
    ) -> Result<(Var, Var)> {
        if g.shape(f1) != g.shape(f2) {
            return Err(Error::shape(
                "cost volume",
                "f2",
                g.shape(f1).to_string(),
                g.shape(f2),
            ));
        }
        let warped = match up_flow {
            Some(flow) => g.backwarp(f2, flow)?,
            None => f2,
        };
        let cv = g.correlation(f1, warped, self.config.cost_radius)?;
        Ok((g.leaky_relu(cv, self.config.leaky_slope), warped))
    }

    /// Shared estimator at one level. Returns the flow (the up-sampled
    /// coarser flow plus the predicted residual) and the penultimate
    /// activation.
    pub fn estimate_flow_level<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        level: usize,
        f1: Var,
        cv: Var,
        up_flow: Option<Var>,
    ) -> Result<(Var, Var)> {
        let s = g.shape(f1);
        let adapted = self.conv_act(
            g,
            store,
            &format!("adapter.l{level}"),
            f1,
            ConvGeometry::new(1, 0, 1),
        )?;
        let flow_in = match up_flow {
            Some(f) => f,
            None => g.constant(Tensor::zeros(Shape::new(s.n, 2, s.h, s.w))),
        };
        let input = g.concat(&[flow_in, adapted, cv])?;

        let layers = self.config.estimator_channels.len();
        let mut outs: Vec<Var> = Vec::with_capacity(layers);
        for k in 0..layers {
            let x = match k {
                0 => input,
                1 => outs[0],
                _ => g.concat(&[outs[k - 1], outs[k - 2]])?,
            };
            let name = format!("estimator.conv{}", k + 1);
            let y = if k + 1 == layers {
                self.conv(g, store, &name, x, ConvGeometry::same3(1))?
            } else {
                self.conv_act(g, store, &name, x, ConvGeometry::same3(1))?
            };
            outs.push(y);
        }
        let residual = outs[layers - 1];
        let penult = outs[layers - 2];
        let flow = match up_flow {
            Some(up) => g.add(up, residual)?,
            None => residual,
        };
        Ok((flow, penult))
    }

    /// Dilated context network; adds its output to `flow`.
    pub fn context_refine<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        penult: Var,
        flow: Var,
    ) -> Result<Var> {
        let mut x = g.concat(&[penult, flow])?;
        let layers = self.config.context_channels.len();
        for (k, &d) in self.config.context_dilations.iter().enumerate() {
            let name = format!("context.conv{}", k + 1);
            x = if k + 1 == layers {
                self.conv(g, store, &name, x, ConvGeometry::same3(d))?
            } else {
                self.conv_act(g, store, &name, x, ConvGeometry::same3(d))?
            };
        }
        g.add(flow, x)
    }

    /// `2 * upsample2x(flow)`: the next finer level's flow in its own pixels.
    pub fn upscale_flow<T: Real>(&self, g: &mut Graph<T>, flow: Var) -> Var {
        let up = g.upsample2x(flow);
        g.scale(up, 2.0)
    }

    /// Full forward pass; returns flows for every level `1..=L`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        frame1: Var,
        frame2: Var,
    ) -> Result<LevelFlows> {
        if g.shape(frame1) != g.shape(frame2) {
            return Err(Error::shape(
                "model",
                "frame2",
                g.shape(frame1).to_string(),
                g.shape(frame2),
            ));
        }
        let levels = self.config.levels();
        let x1 = self.pyramid(g, store, frame1)?;
        let x2 = self.pyramid(g, store, frame2)?;
        let mut flows: Vec<Option<Var>> = vec![None; levels];
        let mut coarser: Option<Var> = None;
        for level in (2..=levels).rev() {
            let (mut f1, mut f2) = (x1[level - 2], x2[level - 2]);
            if self.config.use_cbam {
                f1 = self.cbam(g, store, level, f1)?;
                f2 = self.cbam(g, store, level, f2)?;
            }
            let up = coarser.map(|f| self.upscale_flow(g, f));
            let (cv, _) = self.cost_volume(g, f1, f2, up)?;
            let (mut flow, penult) = self.estimate_flow_level(g, store, level, f1, cv, up)?;
            if self.config.context_every_level || level == 2 {
                flow = self.context_refine(g, store, penult, flow)?;
            }
            flows[level - 1] = Some(flow);
            coarser = Some(flow);
        }
        let finest = coarser.expect("at least two levels");
        flows[0] = Some(self.upscale_flow(g, finest));
        Ok(LevelFlows::new(
            flows.into_iter().map(|f| f.unwrap()).collect(),
        ))
    }
}

/// Number of learnable scalars in `store`.
pub fn param_count<T: Real>(store: &ParameterStore<T>) -> usize {
    store.param_count()
}
