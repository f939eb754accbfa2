//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic, a little-endian `u64` header length, the JSON
//! header, every array as little-endian `f64` in header order, and a CRC-32
//! of all preceding bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::BatchSampler;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Mrjl};
use crate::optim::{AdamHyper, AdamState};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const VERSION: &str = "mrjl-ckpt-v1";
const MAGIC: &[u8; 8] = b"MRJLCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    pub step: u64,
    pub sampler: BatchSampler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub hyper: AdamHyper,
    pub state: AdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Parameters and buffers by name.
    pub arrays: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub progress: Option<Progress>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Model,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    kind: ArrayKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    hyper: AdamHyper,
    lrs: BTreeMap<ParamGroup, f64>,
    steps: BTreeMap<String, u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    optimizer: Option<OptimizerHeader>,
    progress: Option<Progress>,
    arrays: Vec<ArrayEntry>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Mrjl, store: &ParamStore) -> Self {
        Self {
            model: model.config().clone(),
            train: None,
            arrays: store.named(),
            optimizer: None,
            progress: None,
        }
    }

    /// Rebuilds the network and loads every array into it.
    pub fn restore(&self) -> Result<(Mrjl, ParamStore)> {
        let (model, mut store) = Mrjl::new(self.model.clone(), 0)?;
        store.load_named(&self.arrays)?;
        Ok((model, store))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        let mut push = |kind, map: &BTreeMap<String, Tensor>| {
            for (name, t) in map {
                entries.push(ArrayEntry {
                    name: name.clone(),
                    kind,
                    shape: t.shape().to_vec(),
                });
            }
        };
        push(ArrayKind::Model, &self.arrays);
        let empty = BTreeMap::new();
        let (m, v) = match &self.optimizer {
            Some(o) => (&o.state.m, &o.state.v),
            None => (&empty, &empty),
        };
        push(ArrayKind::AdamM, m);
        push(ArrayKind::AdamV, v);
        payload.extend(self.arrays.values());
        payload.extend(m.values());
        payload.extend(v.values());
        let header = Header {
            version: VERSION.to_string(),
            model: self.model.clone(),
            train: self.train.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                hyper: o.hyper,
                lrs: o.state.lrs.clone(),
                steps: o.state.steps.clone(),
            }),
            progress: self.progress.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let data_len: usize = payload.iter().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + data_len + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let prefix = MAGIC.len() + 8;
        if bytes.len() < prefix + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(integrity("not a checkpoint archive"));
        }
        let header_len = u64::from_le_bytes(bytes[MAGIC.len()..prefix].try_into().expect("8 bytes")) as usize;
        let body_end = bytes.len() - 4;
        if header_len > body_end - prefix {
            return Err(integrity("header length exceeds archive"));
        }
        let header: Header = serde_json::from_slice(&bytes[prefix..prefix + header_len])
            .map_err(|e| integrity(format!("unreadable header: {e}")))?;
        if header.version != VERSION {
            return Err(Error::Version {
                expected: VERSION.to_string(),
                found: header.version,
            });
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(integrity("checksum mismatch"));
        }
        let mut data = bytes[prefix + header_len..body_end].chunks_exact(8);
        let expected: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if data.len() != expected || !data.remainder().is_empty() {
            return Err(integrity("payload size disagrees with header"));
        }
        let mut arrays = BTreeMap::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let values: Vec<f64> = data
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, values)?;
            let target = match entry.kind {
                ArrayKind::Model => &mut arrays,
                ArrayKind::AdamM => &mut m,
                ArrayKind::AdamV => &mut v,
            };
            if target.insert(entry.name.clone(), t).is_some() {
                return Err(integrity(format!("duplicate array {}", entry.name)));
            }
        }
        let optimizer = header.optimizer.map(|o| OptimizerSnapshot {
            hyper: o.hyper,
            state: AdamState {
                lrs: o.lrs,
                steps: o.steps,
                m,
                v,
            },
        });
        Ok(Self {
            model: header.model,
            train: header.train,
            arrays,
            optimizer,
            progress: header.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::ingest(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Short identifier of an archive: the hex CRC-32 of everything before
/// its trailing checksum.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    let body = &bytes[..bytes.len().saturating_sub(4)];
    format!("{:08x}", crc32fast::hash(body))
}
