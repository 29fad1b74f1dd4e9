//! Checkpoint directory: `manifest.json`, `weights.safetensors`, optional
//! `heads.safetensors`, optional `adapter/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, EncoderState, Pooling, Provenance};
use crate::adapters::AdapterWeights;
use crate::error::{Error, Result};
use crate::hashing::config_hash;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "sentadapt-encoder/1";
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.safetensors";
const HEADS: &str = "heads.safetensors";
const ADAPTER_DIR: &str = "adapter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub architecture_id: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub architecture: ArchitectureConfig,
    pub pooling: Pooling,
    pub provenance: Provenance,
    pub dtype: Dtype,
    pub has_adapter: bool,
    /// Hash over architecture, pooling and provenance.
    pub config_hash: String,
}

#[derive(Serialize)]
struct HashedFields<'a> {
    architecture: &'a ArchitectureConfig,
    pooling: Pooling,
    provenance: &'a Provenance,
}

impl<T: Scalar> EncoderState<T> {
    pub fn config_hash(&self) -> Result<String> {
        config_hash(&HashedFields {
            architecture: &self.config,
            pooling: self.pooling,
            provenance: &self.provenance,
        })
    }

    pub fn manifest(&self) -> Result<CheckpointManifest> {
        Ok(CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            architecture_id: self.config.architecture_id.clone(),
            hidden_dim: self.config.hidden_dim,
            num_layers: self.config.num_layers,
            architecture: self.config.clone(),
            pooling: self.pooling,
            provenance: self.provenance.clone(),
            dtype: T::DTYPE,
            has_adapter: self.adapter.is_some(),
            config_hash: self.config_hash()?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.weights.save(&dir.join(WEIGHTS))?;
        if !self.heads.is_empty() {
            self.heads.save(&dir.join(HEADS))?;
        }
        let adapter_dir = dir.join(ADAPTER_DIR);
        match &self.adapter {
            Some(a) => a.save(&adapter_dir)?,
            None if adapter_dir.exists() => fs::remove_dir_all(&adapter_dir)?,
            None => {}
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest()?)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| Error::Ingestion {
            path: dir.join(MANIFEST),
            reason: e.to_string(),
        })?;
        let m: CheckpointManifest = serde_json::from_str(&text)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Archive(format!("unsupported checkpoint format `{}`", m.format)));
        }
        if m.dtype != T::DTYPE {
            return Err(Error::Archive(format!("checkpoint stored as {}, loading as {}", m.dtype, T::DTYPE)));
        }
        m.architecture.validate()?;
        let weights = ParamStore::load(&dir.join(WEIGHTS))?;
        for (name, shape) in m.architecture.backbone_shapes() {
            let t = weights.expect(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("checkpoint tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        let heads_path = dir.join(HEADS);
        let heads = if heads_path.exists() { ParamStore::load(&heads_path)? } else { ParamStore::new() };
        let adapter = if m.has_adapter { Some(AdapterWeights::load(&dir.join(ADAPTER_DIR))?) } else { None };
        let state = Self {
            config: m.architecture,
            pooling: m.pooling,
            weights,
            heads,
            adapter,
            provenance: m.provenance,
        };
        if let Some(a) = &state.adapter {
            if a.source_hidden_dim != state.config.hidden_dim || a.source_num_layers != state.config.num_layers {
                return Err(Error::Shape("checkpoint adapter dimensions disagree with the backbone".into()));
            }
        }
        Ok(state)
    }
}
