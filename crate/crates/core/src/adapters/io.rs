use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterConfig, AdapterKind, AdapterWeights, InitMode};
use crate::encoder::StageTag;
use crate::error::{Error, Result};
use crate::hashing::hash_bytes;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::ParamStore;

pub const ADAPTER_FORMAT: &str = "sentadapt-adapter/1";
const MANIFEST: &str = "adapter.json";
const TENSORS: &str = "adapter.safetensors";

/// Contents of `adapter.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub format: String,
    pub kind: AdapterKind,
    pub init_mode: InitMode,
    pub config: AdapterConfig,
    pub source_architecture_id: String,
    pub source_hidden_dim: usize,
    pub source_num_layers: usize,
    pub source_provenance: Vec<StageTag>,
    pub trained_stages: Vec<StageTag>,
    pub training_hash: Option<String>,
    pub dtype: Dtype,
    pub num_params: usize,
    /// SHA-256 of the tensor archive.
    pub tensors_sha256: String,
}

impl<T: Scalar> AdapterWeights<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let bytes = self.tensors.to_bytes()?;
        let manifest = AdapterManifest {
            format: ADAPTER_FORMAT.into(),
            kind: self.config.kind,
            init_mode: self.config.init_mode,
            config: self.config.clone(),
            source_architecture_id: self.source_architecture_id.clone(),
            source_hidden_dim: self.source_hidden_dim,
            source_num_layers: self.source_num_layers,
            source_provenance: self.source_provenance.clone(),
            trained_stages: self.trained_stages.clone(),
            training_hash: self.training_hash.clone(),
            dtype: T::DTYPE,
            num_params: self.num_params(),
            tensors_sha256: hash_bytes(&bytes),
        };
        fs::write(dir.join(TENSORS), &bytes)?;
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: AdapterManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        if manifest.format != ADAPTER_FORMAT {
            return Err(Error::Archive(format!("unsupported adapter format `{}`", manifest.format)));
        }
        if manifest.dtype != T::DTYPE {
            return Err(Error::Archive(format!(
                "adapter stored as {}, loading as {}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let bytes = fs::read(dir.join(TENSORS))?;
        if hash_bytes(&bytes) != manifest.tensors_sha256 {
            return Err(Error::Archive("adapter tensor archive does not match its manifest hash".into()));
        }
        let w = Self {
            config: manifest.config,
            tensors: ParamStore::from_bytes(&bytes)?,
            source_architecture_id: manifest.source_architecture_id,
            source_hidden_dim: manifest.source_hidden_dim,
            source_num_layers: manifest.source_num_layers,
            source_provenance: manifest.source_provenance,
            trained_stages: manifest.trained_stages,
            training_hash: manifest.training_hash,
        };
        w.validate_shapes()?;
        Ok(w)
    }
}
