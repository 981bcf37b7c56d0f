use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

const FORMAT: &str = "klite-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON container for a trained model. Floats round-trip exactly, so a
/// loaded checkpoint reproduces the saved forward pass bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, vocab: &Vocab, seed: u64) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            seed,
            config: params.config.clone(),
            vocab: vocab.clone(),
            tensors: params
                .tensors()
                .into_iter()
                .map(|t| StoredTensor {
                    name: t.name,
                    shape: t.shape,
                    data: t.data.to_vec(),
                })
                .collect(),
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Load(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if self.vocab.size() != self.config.vocab_size {
            return Err(Error::Load(format!(
                "vocabulary has {} ids but config expects {}",
                self.vocab.size(),
                self.config.vocab_size
            )));
        }
        let mut params = ModelParams::init(self.config.clone(), 0)?;
        let views = params.tensors_mut();
        if views.len() != self.tensors.len() {
            return Err(Error::Load(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                views.len()
            )));
        }
        for (dst, src) in views.into_iter().zip(&self.tensors) {
            if dst.name != src.name || dst.shape != src.shape || dst.data.len() != src.data.len() {
                return Err(Error::Load(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("checkpoint tensors".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = serde_json::to_string(self)?;
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
    }
}
