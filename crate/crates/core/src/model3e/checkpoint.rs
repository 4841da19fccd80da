//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "FTMPCKPT"
//! version    u32 LE
//! header_len u32 LE
//! header     JSON (CheckpointHeader), header_len bytes
//! params     f64 LE values of each tensor in header order, row-major
//! crc32      u32 LE over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numcore::{Parameterized, Tensor};
use crate::talk_move::TalkMove;

pub const MAGIC: &[u8; 8] = b"FTMPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_kind: String,
    /// Class names in output order.
    pub labels: Vec<String>,
    pub window: usize,
    /// Model-specific settings.
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocabulary>,
    pub params: Vec<ParamSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

pub fn canonical_labels() -> Vec<String> {
    TalkMove::ALL.iter().map(|m| m.name().to_string()).collect()
}

impl Checkpoint {
    pub fn new(model_kind: &str, window: usize, config: serde_json::Value, vocab: Option<Vocabulary>) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                model_kind: model_kind.to_string(),
                labels: canonical_labels(),
                window,
                config,
                vocab,
                params: Vec::new(),
            },
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.header.params.push(ParamSpec {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
        });
        self.tensors.push(t);
    }

    /// Appends every parameter value of `model`.
    pub fn push_params<M: Parameterized + ?Sized>(&mut self, model: &M) {
        for (name, p) in model.params() {
            self.push(&name, p.value.clone());
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.header
            .params
            .iter()
            .position(|p| p.name == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::invalid(format!("checkpoint has no tensor {name:?}")))
    }

    /// Copies stored values into `model`; names and shapes must match.
    pub fn restore_params<M: Parameterized + ?Sized>(&self, model: &mut M) -> Result<()> {
        for (name, p) in model.params_mut() {
            let t = self.tensor(&name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} is {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            p.zero_grad();
        }
        Ok(())
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.config.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.labels != canonical_labels() {
            return Err(Error::invalid("checkpoint labels are not in canonical order"));
        }
        let header = serde_json::to_vec(&self.header)?;
        let values: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::invalid("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        if bytes.len() < 20 {
            return Err(Error::Checksum {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::invalid("checkpoint header length exceeds file size"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[16..header_end])?;
        if header.labels != canonical_labels() {
            return Err(Error::invalid("checkpoint labels are not in canonical order"));
        }
        let mut values = body[header_end..].chunks_exact(8);
        let mut tensors = Vec::with_capacity(header.params.len());
        for spec in &header.params {
            let n = spec.rows * spec.cols;
            let data: Vec<f64> = values
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.len() != n {
                return Err(Error::invalid(format!("checkpoint ends inside tensor {}", spec.name)));
            }
            tensors.push(Tensor::from_vec(spec.rows, spec.cols, data)?);
        }
        if values.next().is_some() || !values.remainder().is_empty() {
            return Err(Error::invalid("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
