//! Checkpoint files.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "AMPOSECK"
//! offset 8   u32       format version
//! offset 12  u64       header length H
//! offset 20  H bytes   JSON header
//! offset 20+H          tensor payload
//! ```
//!
//! The header records the model and training configs, progress counters,
//! the payload element type (`f64` or `f32`), the SHA-256 of the payload,
//! and a directory of `{name, shape, offset}` entries with offsets in
//! elements from the payload start. Tensors are stored row-major in
//! directory order: model parameters (`param/<name>`), then Adam first
//! moments (`adam_m/<name>`) and second moments (`adam_v/<name>`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerState, TrainConfig, TrainProgress};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::numerics::Tensor;
use crate::params::Parameterized;

pub const MAGIC: &[u8; 8] = b"AMPOSECK";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Exact; required for bit-identical resume.
    #[default]
    F64,
    /// Half the size; values are rounded on save.
    F32,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub progress: TrainProgress,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    progress: TrainProgress,
    optimizer_step: u64,
    dtype: Precision,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        train_config: &TrainConfig,
        progress: &TrainProgress,
        optimizer: &OptimizerState,
    ) -> Self {
        Checkpoint {
            model_config: model.config().clone(),
            train_config: train_config.clone(),
            progress: progress.clone(),
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: optimizer.clone(),
        }
    }

    /// Rebuild the model and load the stored weights into it.
    pub fn model(&self) -> Result<Model> {
        let mut model = build_model(&self.model_config, 0)?;
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        let stored: Vec<&String> = self.params.iter().map(|(n, _)| n).collect();
        if names.iter().collect::<Vec<_>>() != stored {
            return Err(Error::Checkpoint(
                "stored parameter names do not match the model config".into(),
            ));
        }
        let values: Vec<Tensor> = self.params.iter().map(|(_, t)| t.clone()).collect();
        model
            .set_param_values(&values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn to_bytes(&self, precision: Precision) -> Result<Vec<u8>> {
        if self.optimizer.m.len() != self.params.len()
            || self.optimizer.v.len() != self.params.len()
        {
            return Err(Error::Checkpoint(
                "optimizer state does not match the parameter list".into(),
            ));
        }
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        let groups: [(&str, Vec<&Tensor>); 3] = [
            ("param", self.params.iter().map(|(_, t)| t).collect()),
            ("adam_m", self.optimizer.m.iter().collect()),
            ("adam_v", self.optimizer.v.iter().collect()),
        ];
        for (prefix, ts) in &groups {
            for ((name, _), t) in self.params.iter().zip(ts) {
                tensors.push(TensorEntry {
                    name: format!("{prefix}/{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
                for &v in t.data() {
                    match precision {
                        Precision::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                        Precision::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    }
                }
            }
        }
        let header = Header {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            progress: self.progress.clone(),
            optimizer_step: self.optimizer.step,
            dtype: precision,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Err(Error::Checkpoint(m));
        if bytes.len() < PREAMBLE {
            return fail(format!(
                "truncated file: {} bytes, preamble needs {PREAMBLE}",
                bytes.len()
            ));
        }
        if &bytes[..8] != MAGIC {
            return fail("not a checkpoint file (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return fail(format!(
                "format version mismatch: file has {version}, this build reads {FORMAT_VERSION}"
            ));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let Some(payload_start) = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
        else {
            return fail(format!(
                "truncated file: header of {header_len} bytes is incomplete"
            ));
        };
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let payload = &bytes[payload_start..];
        let width = header.dtype.width();
        let elements: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let expected = elements * width;
        if payload.len() < expected {
            return fail(format!(
                "truncated file: payload has {} bytes, directory needs {expected}",
                payload.len()
            ));
        }
        if payload.len() > expected {
            return fail(format!(
                "{} unexpected trailing bytes after the payload",
                payload.len() - expected
            ));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return fail("digest mismatch: payload does not match its recorded SHA-256".into());
        }

        let mut groups: [Vec<(String, Tensor)>; 3] = Default::default();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * width;
            let Some(raw) = payload.get(start..start + n * width) else {
                return fail(format!("tensor {} lies outside the payload", entry.name));
            };
            let data: Vec<f64> = match header.dtype {
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            let t =
                Tensor::new(&entry.shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let (prefix, name) = entry
                .name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", entry.name)))?;
            let slot = match prefix {
                "param" => 0,
                "adam_m" => 1,
                "adam_v" => 2,
                other => return fail(format!("unknown tensor group {other}")),
            };
            groups[slot].push((name.to_string(), t));
        }
        let [params, m, v] = groups;
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        for moments in [&m, &v] {
            if moments
                .iter()
                .map(|(n, _)| n.as_str())
                .ne(names.iter().copied())
            {
                return fail("optimizer moments do not line up with the parameters".into());
            }
        }
        Ok(Checkpoint {
            model_config: header.model_config,
            train_config: header.train_config,
            progress: header.progress,
            params,
            optimizer: OptimizerState {
                step: header.optimizer_step,
                m: m.into_iter().map(|(_, t)| t).collect(),
                v: v.into_iter().map(|(_, t)| t).collect(),
            },
        })
    }
}

/// Write a full-precision checkpoint. The file appears only once complete.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with(ckpt, path, Precision::F64)
}

pub fn save_checkpoint_with(
    ckpt: &Checkpoint,
    path: impl AsRef<Path>,
    precision: Precision,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes(precision)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
