//! `LFCK` checkpoints.
//!
//! Layout (little-endian): magic `LFCK`, `u32` version, `u32` entry count;
//! per entry a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32`
//! dims and the `f32` payload; then an `xxh3_64` checksum of everything
//! before it.
//!
//! Parameters come first in name order. ADAM moments follow under the
//! `~adam.m/` and `~adam.v/` prefixes, then run metadata under `~meta/`.
//! Integers wider than 24 bits and `f64` values are split into four 16-bit
//! limbs so every field survives the `f32` payload exactly.

use std::collections::BTreeMap;
use std::path::Path;

use super::{put_f32s, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Moments, ParameterStore};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "~adam.m/";
const ADAM_V: &str = "~adam.v/";
const META: &str = "~meta/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Finetune => "finetune",
        }
    }
}

/// Everything needed to resume or deploy a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Weights, ADAM moments and step count.
    pub params: ParameterStore<f32>,
    pub model: ModelConfig,
    pub phase: Phase,
    /// Completed epochs in `phase`.
    pub epoch: u32,
    pub best_validation_loss: f64,
    /// Learning rate for the next epoch.
    pub lr: f64,
    /// Validation rounds since the best loss last improved.
    pub stale_rounds: u32,
}

impl Checkpoint {
    pub fn new(params: ParameterStore<f32>, model: ModelConfig, phase: Phase, lr: f64) -> Self {
        Self {
            params,
            model,
            phase,
            epoch: 0,
            best_validation_loss: f64::INFINITY,
            lr,
            stale_rounds: 0,
        }
    }

    pub fn config_fingerprint(&self) -> u64 {
        self.model.fingerprint()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        for (name, t) in self.params.iter() {
            if name.starts_with('~') {
                return Err(Error::Config(format!(
                    "parameter name `{name}` uses the reserved `~` prefix"
                )));
            }
            entries.push((name.to_string(), dims_of(t.shape()), t.data().to_vec()));
        }
        for (name, t) in self.params.iter() {
            if let Some(m) = self.params.moments(name) {
                let dims = dims_of(t.shape());
                entries.push((format!("{ADAM_M}{name}"), dims.clone(), m.first.clone()));
                entries.push((format!("{ADAM_V}{name}"), dims, m.second.clone()));
            }
        }
        for (key, values) in self.meta_entries() {
            entries.push((format!("{META}{key}"), vec![values.len()], values));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, dims, data) in &entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, data);
        }
        let sum = xxhash_rust::xxh3::xxh3_64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::format(origin, "file too short for a checkpoint"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(origin, "bad magic, expected LFCK"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = xxhash_rust::xxh3::xxh3_64(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: origin.to_string(),
                stored,
                computed,
            });
        }
        let mut r = Reader::new(body, origin);
        r.take(4)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported version {version}"),
            ));
        }
        let count = r.u32()?;
        let mut params = ParameterStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(origin, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::format(
                    origin,
                    format!("entry `{name}` has rank {rank}"),
                ));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel =
                numel.ok_or_else(|| Error::format(origin, format!("`{name}` is too large")))?;
            let data = r.f32s(numel)?;
            if let Some(key) = name.strip_prefix(META) {
                meta.insert(key.to_string(), data);
            } else if let Some(p) = name.strip_prefix(ADAM_M) {
                first.insert(p.to_string(), data);
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                second.insert(p.to_string(), data);
            } else if name.starts_with('~') {
                return Err(Error::format(
                    origin,
                    format!("unknown reserved entry `{name}`"),
                ));
            } else {
                dims.resize(4, 1);
                let shape = Shape::from_dims([dims[0], dims[1], dims[2], dims[3]]);
                params.insert(name, Tensor::from_vec(shape, data)?);
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(origin, "trailing bytes after the last entry"));
        }
        let meta = Meta { map: meta, origin };
        let mut moments = BTreeMap::new();
        for (name, m) in first {
            let v = second
                .remove(&name)
                .ok_or_else(|| Error::format(origin, format!("`{name}` lacks a second moment")))?;
            moments.insert(
                name,
                Moments {
                    first: m,
                    second: v,
                },
            );
        }
        if let Some(name) = second.keys().next() {
            return Err(Error::format(
                origin,
                format!("`{name}` lacks a first moment"),
            ));
        }
        params
            .set_optimizer_state(moments, meta.limbs("step_count")?)
            .map_err(|e| Error::format(origin, e.to_string()))?;

        let model = ModelConfig {
            pyramid_channels: meta.ints("model.pyramid_channels")?,
            estimator_channels: meta.ints("model.estimator_channels")?,
            context_channels: meta.ints("model.context_channels")?,
            context_dilations: meta.ints("model.context_dilations")?,
            cost_radius: meta.int("model.cost_radius")?,
            adapter_channels: meta.int("model.adapter_channels")?,
            leaky_slope: f64::from_bits(meta.limbs("model.leaky_slope")?),
            cbam_reduction: meta.int("model.cbam_reduction")?,
            cbam_kernel: meta.int("model.cbam_kernel")?,
            use_cbam: meta.int("model.use_cbam")? != 0,
            context_every_level: meta.int("model.context_every_level")? != 0,
        };
        if model.fingerprint() != meta.limbs("fingerprint")? {
            return Err(Error::format(
                origin,
                "model configuration does not match its stored fingerprint",
            ));
        }
        let phase = match meta.int("phase")? {
            0 => Phase::Train,
            1 => Phase::Finetune,
            p => return Err(Error::format(origin, format!("unknown phase {p}"))),
        };
        Ok(Self {
            params,
            model,
            phase,
            epoch: meta.int("epoch")? as u32,
            best_validation_loss: f64::from_bits(meta.limbs("best_validation_loss")?),
            lr: f64::from_bits(meta.limbs("lr")?),
            stale_rounds: meta.int("stale_rounds")? as u32,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, &path.display().to_string())
    }

    fn meta_entries(&self) -> Vec<(&'static str, Vec<f32>)> {
        let m = &self.model;
        let ints = |v: &[usize]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        vec![
            (
                "best_validation_loss",
                limbs(self.best_validation_loss.to_bits()),
            ),
            ("epoch", vec![self.epoch as f32]),
            ("fingerprint", limbs(self.config_fingerprint())),
            ("lr", limbs(self.lr.to_bits())),
            ("model.adapter_channels", vec![m.adapter_channels as f32]),
            ("model.cbam_kernel", vec![m.cbam_kernel as f32]),
            ("model.cbam_reduction", vec![m.cbam_reduction as f32]),
            ("model.context_channels", ints(&m.context_channels)),
            ("model.context_dilations", ints(&m.context_dilations)),
            (
                "model.context_every_level",
                vec![m.context_every_level as u8 as f32],
            ),
            ("model.cost_radius", vec![m.cost_radius as f32]),
            ("model.estimator_channels", ints(&m.estimator_channels)),
            ("model.leaky_slope", limbs(m.leaky_slope.to_bits())),
            ("model.pyramid_channels", ints(&m.pyramid_channels)),
            ("model.use_cbam", vec![m.use_cbam as u8 as f32]),
            (
                "phase",
                vec![if self.phase == Phase::Train { 0.0 } else { 1.0 }],
            ),
            ("stale_rounds", vec![self.stale_rounds as f32]),
            ("step_count", limbs(self.params.step_count())),
        ]
    }
}

// Trailing unit dims are dropped (keeping at least one); loading pads them back.
fn dims_of(s: Shape) -> Vec<usize> {
    let mut dims = s.dims().to_vec();
    while dims.len() > 1 && dims.last() == Some(&1) {
        dims.pop();
    }
    dims
}

fn limbs(v: u64) -> Vec<f32> {
    (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect()
}

struct Meta<'a> {
    map: BTreeMap<String, Vec<f32>>,
    origin: &'a str,
}

impl Meta<'_> {
    fn get(&self, key: &str) -> Result<&[f32]> {
        self.map
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::format(self.origin, format!("missing metadata `{key}`")))
    }

    fn ints(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)?
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::format(
                        self.origin,
                        format!("metadata `{key}` holds a non-integer {v}"),
                    ))
                }
            })
            .collect()
    }

    fn int(&self, key: &str) -> Result<usize> {
        match self.ints(key)?.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::format(
                self.origin,
                format!("metadata `{key}` must be a scalar"),
            )),
        }
    }

    fn limbs(&self, key: &str) -> Result<u64> {
        let parts = self.ints(key)?;
        if parts.len() != 4 || parts.iter().any(|&p| p > 0xffff) {
            return Err(Error::format(
                self.origin,
                format!("metadata `{key}` is malformed"),
            ));
        }
        Ok(parts
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &p)| acc | (p as u64) << (16 * i)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let mut params = ParameterStore::new();
        let mut w =
            Tensor::from_vec(Shape::new(2, 1, 1, 3), vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]).unwrap();
        w.accumulate_grad(&[0.1; 6]);
        let mut b = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.5, -0.5]).unwrap();
        b.accumulate_grad(&[1.0, -1.0]);
        params.insert("a.weight", w);
        params.insert("a.bias", b);
        params.adam_step(&Default::default()).unwrap();
        params.clear_grads();
        let mut c = Checkpoint::new(params, ModelConfig::default(), Phase::Finetune, 3.3e-5);
        c.epoch = 7;
        c.best_validation_loss = 0.012345678901234;
        c.stale_rounds = 2;
        c
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let c = tiny();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.params.step_count(), 1);
    }

    #[test]
    fn bias_dims_are_compacted() {
        assert_eq!(dims_of(Shape::new(2, 1, 1, 1)), vec![2]);
        assert_eq!(dims_of(Shape::new(1, 1, 1, 1)), vec![1]);
        assert_eq!(dims_of(Shape::new(2, 1, 1, 3)), vec![2, 1, 1, 3]);
    }

    #[test]
    fn limbs_are_exact() {
        for v in [0u64, 1, u64::MAX, 0x0123_4567_89ab_cdef, 1e-4f64.to_bits()] {
            let m = Meta {
                map: [("k".to_string(), limbs(v))].into(),
                origin: "mem",
            };
            assert_eq!(m.limbs("k").unwrap(), v);
        }
    }

    #[test]
    fn reserved_names_rejected() {
        let mut c = tiny();
        c.params.insert("~evil", Tensor::scalar(1.0));
        assert!(c.encode().is_err());
    }
}
