//! Binary checkpoint format.
//!
//! ```text
//! "SCVM"            4 bytes magic
//! version           u32 LE
//! header_len        u64 LE
//! header            JSON manifest, header_len bytes
//! payload           little-endian f32, tensors back to back
//! ```
//!
//! The manifest holds the full config, the training step, and one entry per
//! stored tensor (`name`, `dtype`, `shape`, byte `offset` into the payload,
//! plus the parameter's `group`, `frozen` and `decay` flags). Optimizer
//! moments are stored as extra tensors named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamError, ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCVM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub group: ParamGroup,
    pub frozen: bool,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerManifest {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: Config,
    pub step: u64,
    pub optimizer: Option<OptimizerManifest>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

fn entry(name: &str, role: TensorRole, t: &Tensor<f32>, offset: &mut u64, p: (&ParamGroup, bool, bool)) -> TensorEntry {
    let e = TensorEntry {
        name: name.to_string(),
        role,
        dtype: "f32".into(),
        shape: t.shape().to_vec(),
        offset: *offset,
        group: *p.0,
        frozen: p.1,
        decay: p.2,
    };
    *offset += 4 * t.numel() as u64;
    e
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Tensor<f32>> = Vec::new();
        let mut offset = 0u64;
        for p in self.params.iter() {
            tensors.push(entry(
                &p.name,
                TensorRole::Param,
                &p.tensor,
                &mut offset,
                (&p.group, p.frozen, p.decay),
            ));
            payload.push(&p.tensor);
        }
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(CheckpointError::Malformed(
                    "optimizer state does not match parameters".into(),
                ));
            }
            for (role, moments, tag) in [(TensorRole::AdamM, &opt.m, "m"), (TensorRole::AdamV, &opt.v, "v")] {
                for (p, t) in self.params.iter().zip(moments) {
                    let name = format!("adam.{tag}.{}", p.name);
                    tensors.push(entry(&name, role, t, &mut offset, (&p.group, p.frozen, p.decay)));
                    payload.push(t);
                }
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerManifest {
                betas: o.cfg.betas,
                eps: o.cfg.eps,
                weight_decay: o.cfg.weight_decay,
                step: o.step,
            }),
            tensors,
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in payload {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let malformed = |m: &str| CheckpointError::Malformed(m.to_string());
        if bytes.len() < 16 {
            return Err(if bytes.starts_with(MAGIC) || bytes.len() < 4 {
                malformed("truncated header")
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = bytes
            .get(16..16 + header_len)
            .ok_or_else(|| malformed("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(header)?;
        if manifest.format_version != version {
            return Err(malformed("manifest version disagrees with file header"));
        }
        let payload = &bytes[16 + header_len..];
        let mut expected_offset = 0u64;
        let mut read = |e: &TensorEntry| -> Result<Tensor<f32>, CheckpointError> {
            if e.dtype != "f32" {
                return Err(CheckpointError::Malformed(format!("unsupported dtype {}", e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {} at unexpected offset",
                    e.name
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| CheckpointError::Malformed(format!("payload truncated at {}", e.name)))?;
            expected_offset += 4 * n as u64;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Malformed(err.to_string()))
        };

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &manifest.tensors {
            let t = read(e)?;
            match e.role {
                TensorRole::Param => {
                    let id = params.add(e.name.clone(), t, e.group, e.decay)?;
                    params.get_mut(id).frozen = e.frozen;
                }
                TensorRole::AdamM => m.push(t),
                TensorRole::AdamV => v.push(t),
            }
        }
        if expected_offset as usize != payload.len() {
            return Err(malformed("trailing bytes after payload"));
        }
        let optimizer = match manifest.optimizer {
            Some(o) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(malformed("optimizer moments do not match parameters"));
                }
                Some(AdamW {
                    cfg: AdamWConfig {
                        betas: o.betas,
                        eps: o.eps,
                        weight_decay: o.weight_decay,
                    },
                    step: o.step,
                    m,
                    v,
                })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(malformed("moments present without optimizer settings")),
        };
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            params,
            optimizer,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes atomically: a temporary file in the same directory is renamed
    /// over `path`, so an interrupted save never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
