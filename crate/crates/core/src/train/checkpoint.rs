//! Binary checkpoint format.
//!
//! ```text
//! "VTAE" | u32 version | u32 header length | JSON header | payloads | u32 CRC32
//! ```
//!
//! Integers are little-endian. The header holds the model config, epoch, RNG
//! state, optimizer scalars and a directory of tensors (name, dtype code,
//! shape, role). Payloads follow in directory order as raw little-endian
//! scalars. The CRC covers every byte before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimizerState};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ParamKind, ParamStore};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"VTAE";
pub const VERSION: u32 = 1;

/// Everything needed to continue shuffling where a run stopped: batch order
/// is a pure function of the seed and the epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub params: ParamStore<T>,
    pub optimizer: Option<OptimizerState<T>>,
    /// Input normalization the parameters were trained with.
    pub normalization: Option<Normalization>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Weight,
    NoDecay,
    Buffer,
    AdamM,
    AdamV,
}

impl From<ParamKind> for Role {
    fn from(k: ParamKind) -> Self {
        match k {
            ParamKind::Weight => Role::Weight,
            ParamKind::NoDecay => Role::NoDecay,
            ParamKind::Buffer => Role::Buffer,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
    role: Role,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step: u64,
    lr: f64,
    hyper: AdamWConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    rng: RngState,
    optimizer: Option<OptimizerHeader>,
    normalization: Option<Normalization>,
    tensors: Vec<Entry>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl<T: Float> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(&str, &Tensor<T>, Role)> = self
            .params
            .iter()
            .map(|(n, p)| (n, &p.tensor, p.kind.into()))
            .collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.iter().map(|(n, t)| (n.as_str(), t, Role::AdamM)));
            tensors.extend(opt.v.iter().map(|(n, t)| (n.as_str(), t, Role::AdamV)));
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                lr: o.lr,
                hyper: o.hyper,
            }),
            normalization: self.normalization.clone(),
            tensors: tensors
                .iter()
                .map(|(n, t, r)| Entry {
                    name: n.to_string(),
                    dtype: T::DTYPE.code(),
                    shape: t.shape().to_vec(),
                    role: *r,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = tensors.iter().map(|(_, t, _)| t.numel()).sum::<usize>() * T::DTYPE.size_of();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t, _) in &tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint and checks its tensors against the embedded config.
    /// Payloads stored in another dtype are converted to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fmt_err("not a checkpoint: bad magic"));
        }
        if bytes.len() < 16 {
            return Err(fmt_err("checkpoint truncated inside the preamble"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fmt_err(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fmt_err("checkpoint truncated inside the header"))?;
        let crc_ok = crc32fast::hash(body) == stored;
        let header: Header = match serde_json::from_slice(&body[12..header_end]) {
            Ok(h) => h,
            Err(_) if !crc_ok => return Err(fmt_err("checksum mismatch: checkpoint is corrupted")),
            Err(e) => return Err(fmt_err(format!("invalid checkpoint header: {e}"))),
        };
        let mut expected = header_end;
        for e in &header.tensors {
            let dtype = DType::from_code(e.dtype)
                .ok_or_else(|| fmt_err(format!("{}: unknown dtype code {}", e.name, e.dtype)))?;
            expected += e.shape.iter().product::<usize>() * dtype.size_of();
        }
        if body.len() < expected {
            return Err(fmt_err(format!(
                "checkpoint truncated: {} payload bytes of {}",
                body.len() - header_end,
                expected - header_end
            )));
        }
        if !crc_ok {
            return Err(fmt_err("checksum mismatch: checkpoint is corrupted"));
        }
        if body.len() > expected {
            return Err(fmt_err(format!(
                "{} trailing bytes after the last tensor",
                body.len() - expected
            )));
        }

        let mut pos = header_end;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (indexmap::IndexMap::new(), indexmap::IndexMap::new());
        for e in &header.tensors {
            let dtype = DType::from_code(e.dtype).expect("checked above");
            let numel: usize = e.shape.iter().product();
            let len = numel * dtype.size_of();
            let raw = &body[pos..pos + len];
            pos += len;
            let data: Vec<T> = match dtype {
                DType::Float32 => raw.chunks_exact(4).map(|b| T::from_f64(f32::read_le(b) as f64)).collect(),
                DType::Float64 => raw.chunks_exact(8).map(|b| T::from_f64(f64::read_le(b))).collect(),
            };
            let t = Tensor::new(&e.shape, data)?;
            match e.role {
                Role::Weight => params.insert(e.name.clone(), t, ParamKind::Weight)?,
                Role::NoDecay => params.insert(e.name.clone(), t, ParamKind::NoDecay)?,
                Role::Buffer => params.insert(e.name.clone(), t, ParamKind::Buffer)?,
                Role::AdamM => {
                    m.insert(e.name.clone(), t);
                }
                Role::AdamV => {
                    v.insert(e.name.clone(), t);
                }
            }
        }
        let optimizer = header.optimizer.map(|o| OptimizerState {
            hyper: o.hyper,
            step: o.step,
            lr: o.lr,
            m,
            v,
        });
        let ckpt = Checkpoint {
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            params,
            optimizer,
            normalization: header.normalization,
        };
        let cfg = ckpt.config.clone();
        ckpt.check_against(&cfg)?;
        Ok(ckpt)
    }

    /// Errors unless the stored tensors have exactly the layout `cfg` builds.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let (expected, _) = build_model::<f32>(cfg).map_err(|e| fmt_err(format!("checkpoint config: {e}")))?;
        expected.check_same_layout(&self.params)?;
        if let Some(opt) = &self.optimizer {
            for (name, t) in self.params.learnable() {
                for (which, moments) in [("first", &opt.m), ("second", &opt.v)] {
                    match moments.get(name) {
                        Some(mt) if mt.shape() == t.shape() => {}
                        _ => {
                            return Err(fmt_err(format!(
                                "{which} moment of {name} missing or misshapen"
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("vtae.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn save_checkpoint<T: Float>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> Checkpoint<f32> {
        let cfg = ModelConfig::vitae_micro();
        let (params, _) = build_model::<f32>(&cfg).unwrap();
        let optimizer = Some(OptimizerState::new(&params, AdamWConfig::default()));
        Checkpoint {
            config: cfg,
            epoch: 3,
            rng: RngState { seed: 7, next_epoch: 3 },
            params,
            optimizer,
            normalization: Some(Normalization { mean: vec![0.1], std: vec![0.3] }),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = micro();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_problems() {
        let bytes = micro().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..20]), Err(Error::Format(m)) if m.contains("truncated")));
    }
}
