//! Binary checkpoints: an 8-byte little-endian header length, a JSON
//! header, then every tensor's values in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::params::Parameters;
use crate::transformer::{ModelConfig, Precision};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: Dtype,
    pub model: ModelConfig,
    pub spec: ModelSpec,
    /// Non-special vocabulary entries in id order.
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// A model together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn new(model: Model, vocab: Vocabulary) -> Result<Self> {
        model.check_vocab(&vocab)?;
        Ok(Self { model, vocab })
    }

    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            dtype: match self.model.config.precision {
                Precision::F32 => Dtype::F32,
                Precision::F64 => Dtype::F64,
            },
            model: self.model.config.clone(),
            spec: self.model.spec,
            vocab: self.vocab.tokens()[crate::corpus::SPECIALS.len()..].to_vec(),
            tensors: self
                .model
                .tensors()
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header();
        let json = serde_json::to_vec(&header)?;
        let mut out =
            Vec::with_capacity(8 + json.len() + self.model.num_params() * header.dtype.width());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.tensors() {
            for &x in t.data {
                match header.dtype {
                    Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| bad("truncated header length"))?
            .try_into()
            .unwrap();
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| bad("header length overflow"))?;
        let json = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        header.model.validate()?;
        header.spec.validate()?;
        let vocab = Vocabulary::from_tokens(header.vocab.clone());
        if vocab.len() != header.model.vocab_size {
            return Err(bad("vocabulary size disagrees with the model config"));
        }
        let mut model = Model::zeros(&header.model, header.spec);
        let expected: Vec<TensorEntry> = model
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.to_vec(),
            })
            .collect();
        if expected != header.tensors {
            return Err(bad("tensor manifest does not match the model config"));
        }
        let width = header.dtype.width();
        let payload = &bytes[8 + hlen..];
        if payload.len() != model.num_params() * width {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                model.num_params() * width
            )));
        }
        let mut chunks = payload.chunks_exact(width);
        for slice in model.tensors_mut() {
            for x in slice.iter_mut() {
                let c = chunks.next().expect("length checked");
                *x = match header.dtype {
                    Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                };
            }
        }
        Ok(Self { model, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
