//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (specs, config, epoch, history, tensor names and shapes), then
//! every tensor as little-endian `f64` in header order: parameters, running
//! means and variances, and, when present, Adam first and second moments.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::nn::{Buffers, Params, RunningStats};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCCCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub adam: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, usize)>,
    adam_step: Option<u64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let header = Header {
            model: self.model.spec.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            params: params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
            buffers: self.model.buffers.iter().map(|(k, s)| (k.clone(), s.mean.len())).collect(),
            adam_step: self.adam.as_ref().map(|a| a.step),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |values: &[f64]| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, t) in params.iter() {
            put(t.data());
        }
        for (_, s) in self.model.buffers.iter() {
            put(&s.mean);
            put(&s.var);
        }
        if let Some(adam) = self.adam.as_ref().filter(|a| a.step > 0) {
            for moments in [&adam.m, &adam.v] {
                for (name, t) in params.iter() {
                    match moments.get(name) {
                        Some(m) => put(m),
                        None => put(&vec![0.0; t.numel()]),
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(r.take(4).ok_or_else(|| bad("truncated header"))?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let len = u64::from_le_bytes(r.take(8).ok_or_else(|| bad("truncated header"))?.try_into().unwrap());
        let json = r.take(len as usize).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::format(path, format!("checkpoint header: {e}")))?;

        let mut read = |count: usize| -> Result<Vec<f64>> {
            let raw = r.take(count * 8).ok_or_else(|| bad("truncated tensor data"))?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut params = BTreeMap::new();
        for (name, shape) in &header.params {
            let data = read(shape.iter().product())?;
            params.insert(name.clone(), Tensor::new(shape.clone(), data)?);
        }
        let mut buffers = BTreeMap::new();
        for (name, d) in &header.buffers {
            let mean = read(*d)?;
            let var = read(*d)?;
            buffers.insert(name.clone(), RunningStats { mean, var });
        }
        let adam = match header.adam_step {
            None => None,
            Some(step) => {
                let mut m = BTreeMap::new();
                let mut v = BTreeMap::new();
                for target in [&mut m, &mut v].into_iter().filter(|_| step > 0) {
                    for (name, shape) in &header.params {
                        target.insert(name.clone(), read(shape.iter().product())?);
                    }
                }
                Some(Adam {
                    settings: header.config.adam,
                    step,
                    m,
                    v,
                })
            }
        };
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let model = Model::from_parts(header.model, Params::from_map(params), Buffers::from_map(buffers))
            .map_err(|e| Error::format(path, format!("checkpoint does not match its model spec: {e}")))?;
        Ok(Checkpoint {
            model,
            config: header.config,
            epoch: header.epoch,
            history: header.history,
            adam,
        })
    }

    /// Writes to a temporary sibling first so an interrupted save never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(file);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
}
