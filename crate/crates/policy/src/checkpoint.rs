//! Checkpoint files.
//!
//! Layout (little-endian): magic `UAVNCKPT`, `u32` version, `u64` header
//! length, JSON header (model config, tensor names/shapes/groups, scalar
//! extras, step, optimizer moment sizes), then every tensor as raw `f64`,
//! then optimizer first and second moments slot by slot.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DualHeadModel, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Group;

pub const MAGIC: &[u8; 8] = b"UAVNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("bad header: {0}")]
    Header(String),
    #[error("tensor layout mismatch at {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    group: Group,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamWConfig,
    t: u64,
    sizes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensors: Vec<TensorMeta>,
    step: u64,
    extras: BTreeMap<String, f64>,
    meta: BTreeMap<String, String>,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DualHeadModel<f64>,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Scalar training state outside the model (for example log-λ).
    pub extras: BTreeMap<String, f64>,
    /// Free-form provenance strings.
    pub meta: BTreeMap<String, String>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn new(model: DualHeadModel<f64>) -> Self {
        Self {
            model,
            step: 0,
            extras: BTreeMap::new(),
            meta: BTreeMap::new(),
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.config.clone(),
            tensors: self
                .model
                .params
                .iter()
                .map(|t| TensorMeta {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    group: t.group,
                })
                .collect(),
            step: self.step,
            extras: self.extras.clone(),
            meta: self.meta.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config,
                t: o.t,
                sizes: o.m.iter().map(Vec::len).collect(),
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
        out.extend_from_slice(&json);
        let mut put = |v: &[f64]| {
            for &x in v {
                out.write_f64::<LittleEndian>(x).expect("vec write");
            }
        };
        for t in &self.model.params {
            put(&t.data);
        }
        if let Some(o) = &self.optimizer {
            for m in &o.m {
                put(m);
            }
            for v in &o.v {
                put(v);
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = bytes.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = bytes.read_u64::<LittleEndian>()? as usize;
        if len > bytes.len() {
            return Err(CheckpointError::Header("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[..len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        bytes = &bytes[len..];
        let mut model = DualHeadModel::<f64>::zeros(header.model.clone()).map_err(CheckpointError::Header)?;
        if model.params.len() != header.tensors.len() {
            return Err(CheckpointError::Layout(format!("{} tensors", header.tensors.len())));
        }
        let mut take = |n: usize| -> Result<Vec<f64>, CheckpointError> {
            let mut v = vec![0.0; n];
            bytes.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        for (t, m) in model.params.iter_mut().zip(&header.tensors) {
            if t.name != m.name || t.shape != m.shape || t.group != m.group {
                return Err(CheckpointError::Layout(m.name.clone()));
            }
            t.data = take(t.len())?;
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let m = o.sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                let v = o.sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                Some(AdamW {
                    config: o.config,
                    m,
                    v,
                    t: o.t,
                })
            }
            None => None,
        };
        if !bytes.is_empty() {
            return Err(CheckpointError::Header(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self {
            model,
            step: header.step,
            extras: header.extras,
            meta: header.meta,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = ModelConfig::tiny(40, 30);
        cfg.context = 48;
        let model = DualHeadModel::<f64>::new(cfg, 3).unwrap();
        let mut ck = Checkpoint::new(model);
        ck.step = 17;
        ck.extras.insert("log_lambda".into(), -0.123456789);
        ck.meta.insert("stage".into(), "sft".into());
        let sizes: Vec<usize> = ck.model.params.iter().map(|t| t.len()).chain([1]).collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &sizes);
        opt.t = 17;
        opt.m[0][3] = 1e-300;
        opt.v[1][0] = f64::MIN_POSITIVE;
        ck.optimizer = Some(opt);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Io(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Magic)));
    }
}
