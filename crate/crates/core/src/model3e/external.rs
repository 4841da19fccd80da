//! Precomputed sentence embeddings read from a JSONL sidecar file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::windowing::Example;

/// External inputs for one window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtFeatures {
    /// One vector per window element.
    pub utterances: Option<Vec<Vec<f64>>>,
    pub context: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    key: String,
    vec: Vec<f64>,
}

/// Vectors keyed by `"<transcript_id>:<idx>"`, all of one width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExternalEmbeddings {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

pub fn key(transcript_id: &str, idx: u64) -> String {
    format!("{transcript_id}:{idx}")
}

impl ExternalEmbeddings {
    pub fn new(dim: usize) -> Self {
        ExternalEmbeddings {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, key: String, vec: Vec<f64>) -> Result<()> {
        if vec.len() != self.dim {
            return Err(Error::Shape(format!("embedding {key} has width {}, expected {}", vec.len(), self.dim)));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {key}")));
        }
        self.vectors.insert(key, vec);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut out: Option<ExternalEmbeddings> = None;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: PathBuf::from(path),
            line,
            message,
        };
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let emb = out.get_or_insert_with(|| ExternalEmbeddings::new(rec.vec.len()));
            if emb.vectors.contains_key(&rec.key) {
                return Err(parse_err(i + 1, format!("duplicate key {}", rec.key)));
            }
            emb.insert(rec.key, rec.vec).map_err(|e| parse_err(i + 1, e.to_string()))?;
        }
        out.ok_or_else(|| Error::invalid(format!("{} contains no embeddings", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (key, vec) in &self.vectors {
            serde_json::to_writer(
                &mut w,
                &Line {
                    key: key.clone(),
                    vec: vec.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// One vector per window element; padding gets zeros.
    pub fn utterance_features(&self, example: &Example) -> Result<Vec<Vec<f64>>> {
        example
            .window
            .iter()
            .map(|e| match e.utterance_idx {
                None => Ok(vec![0.0; self.dim]),
                Some(idx) => {
                    let k = key(&example.origin.transcript_id, idx);
                    self.get(&k)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| Error::invalid(format!("no external embedding for {k}")))
                }
            })
            .collect()
    }

    /// The vector keyed by the last context utterance.
    pub fn context_features(&self, example: &Example) -> Result<Vec<f64>> {
        let idx = example
            .window
            .last()
            .and_then(|e| e.utterance_idx)
            .ok_or_else(|| Error::invalid("window has no source utterance"))?;
        let k = key(&example.origin.transcript_id, idx);
        self.get(&k)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::invalid(format!("no external embedding for {k}")))
    }
}

/// Builds the external inputs of one example from optional sidecars.
pub fn features_for(
    example: &Example,
    utterances: Option<&ExternalEmbeddings>,
    context: Option<&ExternalEmbeddings>,
) -> Result<ExtFeatures> {
    Ok(ExtFeatures {
        utterances: utterances.map(|e| e.utterance_features(example)).transpose()?,
        context: context.map(|e| e.context_features(example)).transpose()?,
    })
}
