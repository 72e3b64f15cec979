//! Two-phase training: step-decayed training, then plateau-decayed
//! fine-tuning with the masked loss.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::{Checkpoint, Phase};
use crate::graph::Graph;
use crate::loss::{finetune_loss, training_loss, FramePyramids, LossWeights};
use crate::model::FlowModel;
use crate::params::{OptimizerConfig, ParameterStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Train phase: multiply the lr by `step_factor` every `step_every` epochs.
    pub step_factor: f64,
    pub step_every: usize,
    /// Fine-tune phase: multiply the lr by `plateau_factor` after
    /// `plateau_patience` validation rounds without a relative improvement of
    /// at least `plateau_threshold`.
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub seed: u64,
    /// Where per-epoch and best checkpoints go; `None` keeps everything in memory.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn train_phase() -> Self {
        Self {
            phase: Phase::Train,
            epochs: 60,
            batch_size: 4,
            initial_lr: 1e-4,
            step_factor: 0.1,
            step_every: 20,
            plateau_factor: 0.5,
            plateau_patience: 4,
            plateau_threshold: 1e-4,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
            checkpoint_dir: None,
        }
    }

    pub fn finetune_phase() -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 40,
            batch_size: 1,
            initial_lr: 0.5e-4,
            ..Self::train_phase()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Train => Self::train_phase(),
            Phase::Finetune => Self::finetune_phase(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!(
                "epochs and batch_size must be positive (got {} and {})",
                self.epochs, self.batch_size
            ));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            ));
        }
        if !(self.step_factor > 0.0) || !(self.plateau_factor > 0.0) {
            return bad("decay factors must be positive".to_string());
        }
        if self.step_every == 0 || self.plateau_patience == 0 {
            return bad("step_every and plateau_patience must be positive".to_string());
        }
        if !(self.plateau_threshold >= 0.0) {
            return bad(format!(
                "plateau_threshold must be >= 0, got {}",
                self.plateau_threshold
            ));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// Patience counter on the best validation loss seen so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub best: f64,
    pub stale: usize,
}

impl Plateau {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one validation loss; returns `true` when it is a new best.
    pub fn observe(&mut self, val: f64, config: &TrainConfig) -> bool {
        let improved = val < self.best * (1.0 - config.plateau_threshold);
        if improved {
            self.best = val;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= config.plateau_patience {
                self.lr *= config.plateau_factor;
                self.stale = 0;
            }
        }
        improved
    }
}

/// Learning rate for `epoch` (0-based).
///
/// Training: `initial_lr * step_factor^floor(epoch / step_every)`.
/// Fine-tuning: `initial_lr` halved (by `plateau_factor`) once per run of
/// `plateau_patience` validation rounds in `val_history` without improvement.
pub fn lr_schedule(phase: Phase, epoch: usize, val_history: &[f64], config: &TrainConfig) -> f64 {
    match phase {
        Phase::Train => {
            config.initial_lr * config.step_factor.powi((epoch / config.step_every) as i32)
        }
        Phase::Finetune => {
            let mut p = Plateau::new(config.initial_lr);
            for &v in val_history {
                p.observe(v, config);
            }
            p.lr
        }
    }
}

/// Frame pairs `(I1, I2)` of normalized range images, all of one shape.
#[derive(Clone, Debug, Default)]
pub struct PairDataset {
    pairs: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl PairDataset {
    pub fn new(pairs: Vec<(Tensor<f32>, Tensor<f32>)>) -> Result<Self> {
        if let Some((first, _)) = pairs.first() {
            let shape = first.shape();
            if shape.n != 1 || shape.c != 1 {
                return Err(Error::shape("dataset", "frame", "(1, 1, H, W)", shape));
            }
            for (a, b) in &pairs {
                for t in [a, b] {
                    if t.shape() != shape {
                        return Err(Error::shape(
                            "dataset",
                            "frame",
                            shape.to_string(),
                            t.shape(),
                        ));
                    }
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&(Tensor<f32>, Tensor<f32>)> {
        self.pairs.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Tensor<f32>, Tensor<f32>)> {
        self.pairs.iter()
    }

    /// Pairs `indices` stacked along the batch axis.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let a: Vec<_> = indices.iter().map(|&i| &self.pairs[i].0).collect();
        let b: Vec<_> = indices.iter().map(|&i| &self.pairs[i].1).collect();
        Ok((Tensor::stack(&a)?, Tensor::stack(&b)?))
    }

    pub fn frame_shape(&self) -> Option<Shape> {
        self.pairs.first().map(|p| p.0.shape())
    }
}

/// Visiting order of the training pairs in `epoch`: a permutation drawn from
/// a stream fixed by `(seed, epoch)`, so resumed runs replay it.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-batch losses.
    pub train_loss: f64,
    pub validation_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn phase_loss(
    model: &FlowModel,
    store: &ParameterStore<f32>,
    frame1: &Tensor<f32>,
    frame2: &Tensor<f32>,
    config: &TrainConfig,
    g: &mut Graph<f32>,
) -> Result<crate::graph::Var> {
    let a = g.constant(frame1.clone());
    let b = g.constant(frame2.clone());
    let flows = model.forward(g, store, a, b)?;
    let frames = FramePyramids::new(g, frame1, frame2, config.loss.alpha.len())?;
    let terms = match config.phase {
        Phase::Train => training_loss(g, &flows, &frames, &config.loss)?,
        Phase::Finetune => finetune_loss(g, store, &flows, &frames, &config.loss)?,
    };
    Ok(terms.total)
}

/// Mean phase loss over `data`, one pair at a time. Parameters are only read.
pub fn validation_loss(
    model: &FlowModel,
    store: &ParameterStore<f32>,
    data: &PairDataset,
    config: &TrainConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("validation".to_string()));
    }
    let mut total = 0.0;
    for (a, b) in data.iter() {
        let mut g = Graph::new();
        let loss = phase_loss(model, store, a, b, config, &mut g)?;
        total += g.value(loss).data()[0] as f64;
    }
    Ok(total / data.len() as f64)
}

/// One optimizer step on `indices`; returns the batch loss.
fn step(
    model: &FlowModel,
    store: &mut ParameterStore<f32>,
    data: &PairDataset,
    indices: &[usize],
    config: &TrainConfig,
    lr: f64,
) -> Result<Option<f64>> {
    let (a, b) = data.batch(indices)?;
    let mut g = Graph::new();
    let loss = phase_loss(model, store, &a, &b, config, &mut g)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Ok(None);
    }
    g.backward(loss, store)?;
    store.adam_step(&config.optimizer.with_lr(lr))?;
    store.zero_grads();
    Ok(Some(value))
}

/// Runs the epochs of `config.phase` still missing from `start`.
///
/// A checkpoint from the other phase starts this phase afresh: epoch 0, the
/// phase's initial learning rate and a new optimizer state. Validation uses
/// `validation` when given, the epoch's training loss otherwise.
/// `on_epoch` sees each epoch's statistics as soon as they are known.
pub fn run_phase(
    model: &FlowModel,
    train_set: &PairDataset,
    validation: Option<&PairDataset>,
    config: &TrainConfig,
    start: Checkpoint,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training".to_string()));
    }
    if start.model != *model.config() {
        return Err(Error::Config(
            "checkpoint was written for a different model configuration".to_string(),
        ));
    }
    let mut ckpt = start;
    if ckpt.phase != config.phase {
        ckpt.phase = config.phase;
        ckpt.epoch = 0;
        ckpt.best_validation_loss = f64::INFINITY;
        ckpt.stale_rounds = 0;
        ckpt.lr = config.initial_lr;
        ckpt.params.reset_optimizer();
    }
    let mut plateau = Plateau {
        lr: ckpt.lr,
        best: ckpt.best_validation_loss,
        stale: ckpt.stale_rounds as usize,
    };
    let mut history = Vec::new();
    for epoch in ckpt.epoch as usize..config.epochs {
        let lr = match config.phase {
            Phase::Train => lr_schedule(Phase::Train, epoch, &[], config),
            Phase::Finetune => plateau.lr,
        };
        let order = epoch_order(train_set.len(), config.seed, epoch);
        let mut losses = Vec::new();
        for (batch, indices) in order.chunks(config.batch_size).enumerate() {
            match step(model, &mut ckpt.params, train_set, indices, config, lr)? {
                Some(v) => losses.push(v),
                None => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch,
                        pairs: indices.to_vec(),
                    })
                }
            }
            log::debug!("epoch {epoch} batch {batch} loss {:.6}", losses[batch]);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let validation_loss = match validation {
            Some(v) => validation_loss(model, &ckpt.params, v, config)?,
            None => train_loss,
        };
        let improved = plateau.observe(validation_loss, config);
        ckpt.epoch = epoch as u32 + 1;
        ckpt.best_validation_loss = plateau.best;
        ckpt.stale_rounds = plateau.stale as u32;
        ckpt.lr = match config.phase {
            Phase::Train => lr_schedule(Phase::Train, epoch + 1, &[], config),
            Phase::Finetune => plateau.lr,
        };
        if let Some(dir) = &config.checkpoint_dir {
            let name = format!("{}-epoch{:03}.lfck", config.phase.name(), epoch + 1);
            ckpt.save(&dir.join(name))?;
            if improved {
                ckpt.save(&dir.join(format!("{}-best.lfck", config.phase.name())))?;
            }
        }
        let stats = EpochStats {
            epoch,
            lr,
            train_loss,
            validation_loss,
            improved,
        };
        log::info!(
            "{} epoch {}: loss {:.6}, validation {:.6}, lr {:.3e}",
            config.phase.name(),
            epoch + 1,
            train_loss,
            validation_loss,
            lr
        );
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainReport {
        checkpoint: ckpt,
        history,
    })
}

/// Training from fresh parameters initialised with `config.seed`.
pub fn train(
    model: &FlowModel,
    train_set: &PairDataset,
    validation: Option<&PairDataset>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let params = model.init_params(config.seed);
    let start = Checkpoint::new(
        params,
        model.config().clone(),
        Phase::Train,
        config.initial_lr,
    );
    run_phase(model, train_set, validation, config, start, |_| {})
}

/// Fine-tuning from a trained checkpoint.
pub fn finetune(
    model: &FlowModel,
    train_set: &PairDataset,
    validation: Option<&PairDataset>,
    config: &TrainConfig,
    start: Checkpoint,
) -> Result<TrainReport> {
    run_phase(model, train_set, validation, config, start, |_| {})
}
