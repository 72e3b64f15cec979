//! Flat `key = value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored; unknown keys are an
//! error. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `epochs`, `batch_size`, `initial_lr`, `seed` | training loop |
//! | `step_factor`, `step_every` | train-phase step decay |
//! | `plateau_factor`, `plateau_patience`, `plateau_threshold` | fine-tune plateau decay |
//! | `beta1`, `beta2`, `epsilon` | ADAM |
//! | `alpha` (comma list), `gamma`, `norm` (`rms`/`euclidean`), `mask_mode` (`gated`/`literal`) | loss |
//! | `width`, `height`, `fov_up`, `fov_down`, `max_range` | projection |
//! | `use_cbam`, `context_every_level` | model |
//! | `data_root`, `split`, `checkpoint_dir` | data and outputs |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::formats::Phase;
use crate::kitti::DatasetSplit;
use crate::loss::{MaskMode, ResidualNorm};
use crate::model::ModelConfig;
use crate::projection::ProjectionConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub projection: ProjectionConfig,
    pub model: ModelConfig,
    pub data_root: Option<PathBuf>,
    pub split: DatasetSplit,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true or false, got `{value}`"
        ))),
    }
}

impl RunConfig {
    pub fn for_phase(phase: Phase) -> Self {
        Self {
            train: TrainConfig::for_phase(phase),
            projection: ProjectionConfig::default(),
            model: ModelConfig::default(),
            data_root: None,
            split: DatasetSplit::default(),
        }
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let p = &mut self.projection;
        match key {
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "initial_lr" => t.initial_lr = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "step_factor" => t.step_factor = parse(key, value)?,
            "step_every" => t.step_every = parse(key, value)?,
            "plateau_factor" => t.plateau_factor = parse(key, value)?,
            "plateau_patience" => t.plateau_patience = parse(key, value)?,
            "plateau_threshold" => t.plateau_threshold = parse(key, value)?,
            "beta1" => t.optimizer.beta1 = parse(key, value)?,
            "beta2" => t.optimizer.beta2 = parse(key, value)?,
            "epsilon" => t.optimizer.epsilon = parse(key, value)?,
            "alpha" => {
                t.loss.alpha = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "gamma" => t.loss.gamma = parse(key, value)?,
            "norm" => {
                t.loss.norm = match value {
                    "rms" => ResidualNorm::Rms,
                    "euclidean" => ResidualNorm::Euclidean,
                    _ => return Err(Error::Config(format!("`norm`: unknown `{value}`"))),
                }
            }
            "mask_mode" => {
                t.loss.mask_mode = match value {
                    "gated" => MaskMode::Gated,
                    "literal" => MaskMode::Literal,
                    _ => return Err(Error::Config(format!("`mask_mode`: unknown `{value}`"))),
                }
            }
            "checkpoint_dir" => t.checkpoint_dir = Some(PathBuf::from(value)),
            "width" => p.width = parse(key, value)?,
            "height" => p.height = parse(key, value)?,
            "fov_up" => p.fov_up = parse(key, value)?,
            "fov_down" => p.fov_down = parse(key, value)?,
            "max_range" => p.max_range = parse(key, value)?,
            "use_cbam" => self.model.use_cbam = parse_bool(key, value)?,
            "context_every_level" => self.model.context_every_level = parse_bool(key, value)?,
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "split" => self.split = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every line of a config file's text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected key = value", n + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.projection.validate()?;
        self.model.validate()?;
        self.split.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let mut c = RunConfig::for_phase(Phase::Train);
        c.apply_text(
            "# comment\nepochs = 3\nalpha=1,2\nmask_mode = literal\nwidth=256\nuse_cbam=false\n",
            "mem",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.loss.alpha, vec![1.0, 2.0]);
        assert_eq!(c.train.loss.mask_mode, MaskMode::Literal);
        assert_eq!(c.projection.width, 256);
        assert!(!c.model.use_cbam);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut c = RunConfig::for_phase(Phase::Train);
        let e = c
            .apply_text("epochs = 3\nlearning_rate = 1\n", "run.cfg")
            .unwrap_err();
        assert!(e.to_string().contains("run.cfg:2"));
        assert!(c.apply_text("epochs 3", "mem").is_err());
    }
}
