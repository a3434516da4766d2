//! `PCV1` checkpoint files.
//!
//! Little-endian layout: magic `PCV1`, version `u32`, config length `u32`
//! and the model config as TOML text, tensor count `u32` and the model
//! tensors, Adam tensor count `u32` and the moment tensors, the step count
//! `u64`, and the four `u64` words of the sampling RNG. Each tensor is
//! name length `u32`, name bytes, rank `u32`, extents `u32` each, `f32`
//! values.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::binio::{put_f32s, put_u32, put_u64, ByteReader};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PCV1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint file truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Serialized training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Model parameters then batch-norm buffers.
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// First moments then second moments, named `m.<param>` / `v.<param>`.
    pub adam: Vec<(String, Tensor<f32>)>,
    /// Completed optimizer steps (= training iterations).
    pub step: u64,
    pub rng: [u64; 4],
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, 4);
    for d in t.dims() {
        put_u32(out, d as u32);
    }
    put_f32s(out, t.data());
}

fn get_tensor(r: &mut ByteReader<'_>) -> Result<(String, Tensor<f32>), CheckpointError> {
    let short = |_| CheckpointError::Truncated;
    let len = r.u32().map_err(short)? as usize;
    let name = std::str::from_utf8(r.bytes(len).map_err(short)?)
        .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
        .to_string();
    let rank = r.u32().map_err(short)? as usize;
    if rank == 0 || rank > 4 {
        return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
    }
    let mut dims = [1usize; 4];
    for d in dims.iter_mut().skip(4 - rank) {
        *d = r.u32().map_err(short)? as usize;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| CheckpointError::Malformed(format!("{name}: extents overflow")))?;
    let data = r.f32s(count).map_err(short)?;
    let t = Tensor::from_vec(dims, data)
        .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
    Ok((name, t))
}

impl Checkpoint {
    /// State of a freshly built model with zeroed optimizer moments.
    pub fn from_model(model: &Model, adam: Vec<(String, Tensor<f32>)>, step: u64, rng: [u64; 4]) -> Self {
        Checkpoint {
            config: model.config().clone(),
            tensors: model
                .state_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            adam,
            step,
            rng,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let cfg = self.config.to_toml();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (n, t) in &self.tensors {
            put_tensor(&mut out, n, t);
        }
        put_u32(&mut out, self.adam.len() as u32);
        for (n, t) in &self.adam {
            put_tensor(&mut out, n, t);
        }
        put_u64(&mut out, self.step);
        for w in self.rng {
            put_u64(&mut out, w);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let short = |_| CheckpointError::Truncated;
        let mut r = ByteReader::new(bytes);
        if r.bytes(4).map_err(short)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32().map_err(short)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let len = r.u32().map_err(short)? as usize;
        let text = std::str::from_utf8(r.bytes(len).map_err(short)?)
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let config =
            ModelConfig::from_toml(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let n = r.u32().map_err(short)? as usize;
        let tensors = (0..n).map(|_| get_tensor(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let n = r.u32().map_err(short)? as usize;
        let adam = (0..n).map(|_| get_tensor(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let step = r.u64().map_err(short)?;
        let mut rng = [0u64; 4];
        for w in &mut rng {
            *w = r.u64().map_err(short)?;
        }
        if !r.is_empty() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            tensors,
            adam,
            step,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn model(&self) -> Result<Model, CheckpointError> {
        let mut m =
            Model::build(&self.config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        m.load_state(&self.tensors).map_err(|e| match e {
            ModelError::State { name, reason } => {
                CheckpointError::Malformed(format!("{name}: {reason}"))
            }
            other => CheckpointError::Malformed(other.to_string()),
        })?;
        Ok(m)
    }

    /// Loads the checkpoint into a model built for `expected`, refusing a
    /// checkpoint taken with any other config.
    pub fn model_for(&self, expected: &ModelConfig) -> Result<Model, CheckpointError> {
        if &self.config != expected {
            return Err(CheckpointError::ConfigMismatch(config_diff(expected, &self.config)));
        }
        self.model()
    }
}

fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> String {
    let a: toml::Table = toml::from_str(&expected.to_toml()).expect("round trip");
    let b: toml::Table = toml::from_str(&found.to_toml()).expect("round trip");
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let diffs: Vec<String> = keys
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| {
            let show = |v: Option<&toml::Value>| v.map_or("unset".to_string(), |v| v.to_string());
            format!("{k}: model {} vs checkpoint {}", show(a.get(k)), show(b.get(k)))
        })
        .collect();
    diffs.join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            base_channels: 2,
            ..ModelConfig::pconv_unet()
        };
        let m = Model::build(&cfg).unwrap();
        let adam = m
            .params()
            .iter()
            .map(|(n, t)| (format!("m.{n}"), Tensor::full(t.dims(), 0.25)))
            .collect();
        Checkpoint::from_model(&m, adam, 17, [1, 2, 3, u64::MAX])
    }

    #[test]
    fn bytes_round_trip_identically() {
        let c = small();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn errors_are_distinct() {
        let bytes = small().to_bytes();
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::Version { found: 2 })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn other_depth_is_a_config_mismatch() {
        let c = small();
        let deeper = ModelConfig {
            depth: 4,
            ..c.config.clone()
        };
        match c.model_for(&deeper) {
            Err(CheckpointError::ConfigMismatch(msg)) => assert!(msg.contains("depth"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(c.model_for(&c.config).is_ok());
    }
}
