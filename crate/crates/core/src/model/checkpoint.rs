//! Checkpoint layout:
//!
//! ```text
//! 8 bytes   magic "FGAPCKPT"
//! 4 bytes   header length L, u32 little-endian
//! L bytes   TOML header (CheckpointHeader)
//! ...       tensors in header order, little-endian f32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::network::{ModelParams, Network};
use crate::model::optim::TrainConfig;
use crate::model::scalar::Scalar;
use crate::model::ConvNetConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FGAPCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// `param`, `velocity`, `running_mean` or `running_var`.
    pub role: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub scalar: String,
    pub epoch: usize,
    pub updates: u64,
    /// Seed of the training streams and the stream the next epoch uses.
    #[serde(with = "crate::seed_serde")]
    pub rng_seed: u64,
    pub rng_next_stream: u64,
    pub model: ConvNetConfig,
    pub train: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ConvNetConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub updates: u64,
    pub params: ModelParams<f32>,
    pub velocity: Vec<Vec<f32>>,
}

impl Checkpoint {
    fn header(&self, network: &Network) -> CheckpointHeader {
        let mut tensors = Vec::new();
        for role in ["param", "velocity"] {
            for spec in network.param_specs() {
                tensors.push(TensorEntry {
                    name: spec.name.clone(),
                    role: role.into(),
                    len: spec.len,
                });
            }
        }
        for (role, stats) in [("running_mean", &self.params.running_mean), ("running_var", &self.params.running_var)] {
            for (i, s) in stats.iter().enumerate() {
                tensors.push(TensorEntry {
                    name: format!("bn{i}"),
                    role: role.into(),
                    len: s.len(),
                });
            }
        }
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            scalar: f32::NAME.into(),
            epoch: self.epoch,
            updates: self.updates,
            rng_seed: self.train.seed,
            rng_next_stream: self.epoch as u64 + 1,
            model: self.model.clone(),
            train: self.train.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let network = Network::new(&self.model)?;
        network.check_params(&self.params)?;
        let header = toml::to_string(&self.header(&network))
            .map_err(|e| Error::Config(format!("checkpoint header serialization: {e}")))?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Config("checkpoint header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.params.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let all = self
            .params
            .tensors
            .iter()
            .chain(&self.velocity)
            .chain(&self.params.running_mean)
            .chain(&self.params.running_var);
        for t in all {
            t.iter().for_each(|v| v.write_le(&mut out));
        }
        Ok(out)
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let integrity = |message: String| Error::Integrity {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
        let header_bytes = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| integrity(format!("header of {header_len} bytes truncated")))?;
        let text = std::str::from_utf8(header_bytes).map_err(|e| integrity(format!("header is not UTF-8: {e}")))?;
        let header: CheckpointHeader = toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("checkpoint header: {e}"),
        })?;
        if header.format_version != FORMAT_VERSION || header.scalar != f32::NAME {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "unsupported checkpoint version {} / scalar {}",
                    header.format_version, header.scalar
                ),
            });
        }
        let network = Network::new(&header.model)?;
        let template = Checkpoint {
            model: header.model.clone(),
            train: header.train.clone(),
            epoch: header.epoch,
            updates: header.updates,
            params: network.init_params(),
            velocity: Vec::new(),
        };
        if template.header(&network).tensors != header.tensors {
            return Err(integrity("tensor table does not match the model configuration".into()));
        }
        let payload = &bytes[12 + header_len..];
        let expected: usize = header.tensors.iter().map(|t| t.len * f32::BYTES).sum();
        if payload.len() != expected {
            return Err(integrity(format!(
                "payload is {} bytes, tensor table needs {expected}",
                payload.len()
            )));
        }
        let mut chunks = payload.chunks_exact(f32::BYTES).map(f32::read_le);
        let mut take = |len: usize| -> Vec<f32> { chunks.by_ref().take(len).collect() };
        let specs = network.param_specs();
        let tensors = specs.iter().map(|s| take(s.len)).collect();
        let velocity = specs.iter().map(|s| take(s.len)).collect();
        let bn_lens: Vec<usize> = template.params.running_mean.iter().map(Vec::len).collect();
        let running_mean = bn_lens.iter().map(|&l| take(l)).collect();
        let running_var = bn_lens.iter().map(|&l| take(l)).collect();
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            updates: header.updates,
            params: ModelParams {
                tensors,
                running_mean,
                running_var,
            },
            velocity,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
