//! Binary checkpoint container.
//!
//! Layout: `GEATCKPT`, `u32` LE version, `u64` LE header length, a JSON
//! header, then every tensor as little-endian `f32` in directory order. The
//! header carries the model kind, its config, the lab vocabulary, the
//! tokenizer merges and a directory of `name`, `shape`, `dtype` and byte
//! `offset` (relative to the first blob byte).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use geat_core::corpus::LabVocab;
use geat_core::model::{ClassifierParams, Model, ModelConfig, ModelKind, Parameters, TripletParams};
use geat_core::numeric::{Precision, Tensor};
use geat_core::tokenize::Tokenizer;
use serde::{Deserialize, Serialize};

use crate::error::{GeatError, Result};

pub const MAGIC: &[u8; 8] = b"GEATCKPT";
pub const VERSION: u32 = 1;

/// A trained model with everything needed to run it on raw records.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub labs: LabVocab,
    pub tokenizer: Tokenizer,
    /// Precision the model was trained in; stored weights are always `f32`.
    pub precision: Precision,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: ModelConfig,
    labs: Vec<String>,
    tokenizer: Vec<(String, String)>,
    precision: Precision,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn named(&self) -> Vec<(String, &Tensor<f32>)> {
        match &self.model {
            Model::Triplet(p) => p.named(),
            Model::Classifier(p) => p.named(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.named() {
            tensors.push(Entry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: blob.len() as u64,
            });
            for &x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind(),
            config: self.config().clone(),
            labs: self.labs.names().to_vec(),
            tokenizer: self.tokenizer.merge_strings().map(|(l, r)| (l.to_string(), r.to_string())).collect(),
            precision: self.precision,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| GeatError::Data(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| GeatError::format(path, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(20))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(format!("header: {e}")))?;
        let blob = &bytes[header_end..];

        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(bad(format!("tensor {} at offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * count;
            if end > blob.len() {
                return Err(bad(format!("tensor {} runs past the end of the file", e.name)));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("tensor {} has non-finite values", e.name)));
            }
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(err.to_string()))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(bad(format!("tensor {} listed twice", e.name)));
            }
            expected_offset = end as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(bad("trailing bytes after the last tensor".into()));
        }
        if tensors.len() != header.tensors.len() {
            return Err(bad("duplicate tensor names".into()));
        }
        let mut take = |name: &str| -> geat_core::Result<Tensor<f32>> {
            tensors
                .remove(name)
                .ok_or_else(|| geat_core::Error::InvalidArgument(format!("missing tensor {name}")))
        };
        let model = match header.kind {
            ModelKind::Triplet => Model::Triplet(TripletParams::from_named(&header.config, &mut take).map_err(|e| bad(e.to_string()))?),
            ModelKind::Classifier => {
                Model::Classifier(ClassifierParams::from_named(&header.config, &mut take).map_err(|e| bad(e.to_string()))?)
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        let labs = LabVocab::from_names(header.labs).map_err(|e| bad(e.to_string()))?;
        if labs.len() != header.config.lab_count {
            return Err(bad(format!("{} lab names for {} labs", labs.len(), header.config.lab_count)));
        }
        let tokenizer = Tokenizer::from_merge_strings(header.tokenizer.iter().map(|(l, r)| (l.as_str(), r.as_str())))
            .map_err(|e| bad(format!("tokenizer: {e}")))?;
        if tokenizer.vocab_size() > header.config.vocab_size {
            return Err(bad("tokenizer is larger than the model vocabulary".into()));
        }
        Ok(Checkpoint {
            model,
            labs,
            tokenizer,
            precision: header.precision,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| GeatError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| GeatError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
