//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{training_loss, FramePyramids, LossWeights};
use crate::model::FlowModel;
use crate::params::ParameterStore;
use crate::synthetic::texture_tensor;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps gradients that are both
/// essentially zero from reporting noise as large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// One checked coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        !self.probes.is_empty() && self.max_rel_error() < tolerance
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// Settings for [`check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-8,
        }
    }
}

/// Compares the tape's gradient of the scalar built by `loss` with central
/// differences `(L(x + h) - L(x - h)) / 2h` at each `(name, index)` in `probes`.
pub fn check<F>(
    store: &mut ParameterStore<f64>,
    loss: F,
    probes: &[(String, usize)],
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        Ok(g.value(l).data()[0])
    };
    store.zero_grads();
    {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        g.backward(l, store)?;
    }
    let mut report = GradCheckReport::default();
    for (name, index) in probes {
        let analytic = store
            .require(name)?
            .grad()
            .ok_or_else(|| Error::MissingGradient(name.clone()))?[*index];
        let original = store.require(name)?.data()[*index];
        let mut at = |v: f64| -> Result<f64> {
            store.get_mut(name).expect("checked").data_mut()[*index] = v;
            eval(store)
        };
        let plus = at(original + config.step)?;
        let minus = at(original - config.step)?;
        at(original)?;
        let numeric = (plus - minus) / (2.0 * config.step);
        report.probes.push(Probe {
            name: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, config.floor),
        });
    }
    Ok(report)
}

/// Every coordinate of every tensor in `store`.
pub fn all_coordinates<T: crate::tensor::Real>(store: &ParameterStore<T>) -> Vec<(String, usize)> {
    store
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.to_string(), i)))
        .collect()
}

/// A seeded sample of `fraction` of all coordinates, drawn per tensor so that
/// every tensor contributes at least one.
pub fn sample_coordinates<T: crate::tensor::Real>(
    store: &ParameterStore<T>,
    fraction: f64,
    seed: u64,
) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, t) in store.iter() {
        let n = t.numel();
        let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
        let mut picked = sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| (name.to_string(), i)));
    }
    out
}

/// Checks the gradient of the training loss on a pair of independent
/// 64x64 textures with respect to a `fraction` of `model`'s parameters,
/// evaluated in `f64`.
pub fn end_to_end(
    model: &FlowModel,
    fraction: f64,
    seed: u64,
    config: GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut store = model.init_params(seed).cast::<f64>();
    let m = model.config().size_multiple();
    let a = texture_tensor(m, m, seed).cast::<f64>();
    let b = texture_tensor(m, m, seed.wrapping_add(1)).cast::<f64>();
    let probes = sample_coordinates(&store, fraction, seed);
    let w = LossWeights {
        alpha: LossWeights::default().alpha[..model.config().levels()].to_vec(),
        ..LossWeights::default()
    };
    check(
        &mut store,
        |g, s| {
            let x1 = g.constant(a.clone());
            let x2 = g.constant(b.clone());
            let flows = model.forward(g, s, x1, x2)?;
            let frames = FramePyramids::new(g, &a, &b, w.alpha.len())?;
            Ok(training_loss(g, &flows, &frames, &w)?.total)
        },
        &probes,
        config,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-8), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-8) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-12, 1e-8) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::scalar(3.0));
        let probes = all_coordinates(&store);
        let report = check(
            &mut store,
            |g, s| {
                let x = g.param(s, "x")?;
                let y = g.square(x);
                Ok(g.sum(y))
            },
            &probes,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.len(), 1);
        assert!((report.probes[0].analytic - 6.0).abs() < 1e-12);
        assert!(report.passes(1e-8));
    }

    #[test]
    fn sample_covers_every_tensor() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("a", Tensor::zeros(crate::Shape::new(1, 1, 10, 10)));
        store.insert("b", Tensor::zeros(crate::Shape::new(1, 1, 1, 3)));
        let s = sample_coordinates(&store, 0.05, 1);
        assert_eq!(s.iter().filter(|p| p.0 == "a").count(), 5);
        assert_eq!(s.iter().filter(|p| p.0 == "b").count(), 1);
    }
}
