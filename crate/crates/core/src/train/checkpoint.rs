//! Checkpoint files: the named-tensor container followed by a trailer
//! `"NHPC"`, version `u32`, length `u32` and the run metadata as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::field::{Model, ModelConfig};
use crate::tensor::{read_named, write_named, ParamStore, Real};

const TRAILER_MAGIC: &[u8; 4] = b"NHPC";
const TRAILER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    /// Optimizer steps taken.
    pub step: usize,
    pub store: ParamStore<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = write_named(&self.store.to_named())?;
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            step: self.step,
        })?;
        out.extend_from_slice(TRAILER_MAGIC);
        out.extend_from_slice(&TRAILER_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (entries, used) = read_named(bytes)?;
        let rest = &bytes[used..];
        if rest.len() < 12 || &rest[..4] != TRAILER_MAGIC {
            return Err(Error::Format("checkpoint has no config trailer".into()));
        }
        let version = u32::from_le_bytes(rest[4..8].try_into().unwrap());
        if version != TRAILER_VERSION {
            return Err(Error::Format(format!(
                "checkpoint trailer version {version}, expected {TRAILER_VERSION}"
            )));
        }
        let len = u32::from_le_bytes(rest[8..12].try_into().unwrap()) as usize;
        if rest.len() != 12 + len {
            return Err(Error::Format(format!(
                "checkpoint trailer holds {} bytes, header says {len}",
                rest.len() - 12
            )));
        }
        let meta: Meta = serde_json::from_slice(&rest[12..])?;
        meta.config.validate()?;
        Ok(Checkpoint {
            config: meta.config,
            step: meta.step,
            store: ParamStore::from_named(&entries)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)
            .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            store: self.store.cast(),
        }
    }

    /// The model described by the embedded config.
    pub fn model(&self) -> Result<Model> {
        Model::lookup(&self.store, self.config.model.clone())
    }

    /// Binds the weights to a different architecture; fails listing the
    /// missing and unexpected parameter names when they disagree.
    pub fn model_for(&self, cfg: &ModelConfig) -> Result<Model> {
        Model::lookup(&self.store, cfg.clone())
    }
}
