//! Parameter-efficient modules and their portability between encoders.
//!
//! An adapter is trained against one backbone, exported as a self-contained
//! [`AdapterWeights`] artifact, and imported into any other backbone of the same
//! architecture (for example a domain-adapted copy of the base model). Tensor
//! shapes are a pure function of the adapter config, hidden size and layer count.

mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderState, StageTag};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub use io::{AdapterManifest, ADAPTER_FORMAT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    /// Bottleneck branch in parallel with each feed-forward sublayer.
    Parallel,
    /// Sequential bottleneck inserted after each feed-forward sublayer.
    Bottleneck,
    /// Low-rank updates of the query and value projections.
    Lora,
    /// Learned key/value vectors prepended to every attention layer.
    Prefix,
}

impl AdapterKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parallel" => Ok(Self::Parallel),
            "bottleneck" => Ok(Self::Bottleneck),
            "lora" => Ok(Self::Lora),
            "prefix" => Ok(Self::Prefix),
            other => Err(Error::Config(format!("unknown adapter kind `{other}`"))),
        }
    }

    /// Whether a zero-initialized module leaves the encoder output unchanged.
    pub fn zero_init_is_identity(self) -> bool {
        !matches!(self, AdapterKind::Prefix)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Output projections (up-projection, LoRA `B`) start at zero.
    #[default]
    ZeroOutProj,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_len: Option<usize>,
    pub scaling: f64,
    #[serde(default)]
    pub init_mode: InitMode,
}

impl AdapterConfig {
    pub fn parallel() -> Self {
        Self {
            kind: AdapterKind::Parallel,
            reduction_factor: Some(2),
            rank: None,
            prefix_len: None,
            scaling: 4.0,
            init_mode: InitMode::ZeroOutProj,
        }
    }

    pub fn bottleneck() -> Self {
        Self {
            kind: AdapterKind::Bottleneck,
            reduction_factor: Some(16),
            rank: None,
            prefix_len: None,
            scaling: 1.0,
            init_mode: InitMode::ZeroOutProj,
        }
    }

    pub fn lora() -> Self {
        Self {
            kind: AdapterKind::Lora,
            reduction_factor: None,
            rank: Some(8),
            prefix_len: None,
            scaling: 8.0,
            init_mode: InitMode::ZeroOutProj,
        }
    }

    pub fn prefix() -> Self {
        Self {
            kind: AdapterKind::Prefix,
            reduction_factor: None,
            rank: None,
            prefix_len: Some(16),
            scaling: 1.0,
            init_mode: InitMode::ZeroOutProj,
        }
    }

    pub fn default_for(kind: AdapterKind) -> Self {
        match kind {
            AdapterKind::Parallel => Self::parallel(),
            AdapterKind::Bottleneck => Self::bottleneck(),
            AdapterKind::Lora => Self::lora(),
            AdapterKind::Prefix => Self::prefix(),
        }
    }

    pub fn with_init(mut self, init_mode: InitMode) -> Self {
        self.init_mode = init_mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scaling.is_finite() || self.scaling <= 0.0 {
            return Err(Error::Config(format!("adapter scaling {} must be finite and > 0", self.scaling)));
        }
        let (rf, rank, plen) = (self.reduction_factor, self.rank, self.prefix_len);
        let ok = match self.kind {
            AdapterKind::Parallel | AdapterKind::Bottleneck => {
                matches!(rf, Some(r) if r > 0) && rank.is_none() && plen.is_none()
            }
            AdapterKind::Lora => matches!(rank, Some(r) if r > 0) && rf.is_none() && plen.is_none(),
            AdapterKind::Prefix => matches!(plen, Some(p) if p > 0) && rf.is_none() && rank.is_none(),
        };
        if !ok {
            return Err(Error::Config(format!(
                "{:?} adapter needs exactly its own size field (reduction_factor / rank / prefix_len) set and positive",
                self.kind
            )));
        }
        Ok(())
    }

    /// Width of the bottleneck for parallel/bottleneck adapters.
    pub fn bottleneck_dim(&self, hidden_dim: usize) -> Result<usize> {
        let rf = self
            .reduction_factor
            .ok_or_else(|| Error::Config("reduction_factor missing".into()))?;
        if rf > hidden_dim {
            return Err(Error::Config(format!("reduction_factor {rf} exceeds hidden_dim {hidden_dim}")));
        }
        Ok(hidden_dim / rf)
    }

    /// Adapter tensor names (relative to the `adapter.` namespace) and shapes.
    pub fn shapes(&self, hidden_dim: usize, num_layers: usize) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let d = hidden_dim;
        let mut out = Vec::new();
        for l in 0..num_layers {
            match self.kind {
                AdapterKind::Parallel | AdapterKind::Bottleneck => {
                    let r = self.bottleneck_dim(d)?;
                    out.push((format!("layers.{l}.down.w"), vec![d, r]));
                    out.push((format!("layers.{l}.down.b"), vec![r]));
                    out.push((format!("layers.{l}.up.w"), vec![r, d]));
                    out.push((format!("layers.{l}.up.b"), vec![d]));
                }
                AdapterKind::Lora => {
                    let r = self.rank.expect("validated");
                    for proj in ["q", "v"] {
                        out.push((format!("layers.{l}.{proj}.a"), vec![r, d]));
                        out.push((format!("layers.{l}.{proj}.b"), vec![d, r]));
                    }
                }
                AdapterKind::Prefix => {
                    let p = self.prefix_len.expect("validated");
                    out.push((format!("layers.{l}.key"), vec![p, d]));
                    out.push((format!("layers.{l}.value"), vec![p, d]));
                }
            }
        }
        Ok(out)
    }

    pub fn num_params(&self, hidden_dim: usize, num_layers: usize) -> Result<usize> {
        Ok(self
            .shapes(hidden_dim, num_layers)?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    /// Multiplier applied to the adapter branch output.
    pub fn branch_scale(&self) -> f64 {
        match self.kind {
            AdapterKind::Lora => self.scaling / self.rank.unwrap_or(1) as f64,
            _ => self.scaling,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights<T> {
    pub config: AdapterConfig,
    pub tensors: ParamStore<T>,
    pub source_architecture_id: String,
    pub source_hidden_dim: usize,
    pub source_num_layers: usize,
    /// Stages of the backbone the adapter was trained against.
    pub source_provenance: Vec<StageTag>,
    /// Stages the adapter itself has been trained in (e.g. `[SEPT]`).
    pub trained_stages: Vec<StageTag>,
    /// Hash of the training configuration that produced the tensors, if any.
    pub training_hash: Option<String>,
}

impl<T: Scalar> AdapterWeights<T> {
    pub fn init(
        config: AdapterConfig,
        architecture_id: &str,
        hidden_dim: usize,
        num_layers: usize,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let shapes = config.shapes(hidden_dim, num_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = ParamStore::new();
        let zero_out = config.init_mode == InitMode::ZeroOutProj;
        for (name, shape) in shapes {
            let t = match config.kind {
                AdapterKind::Parallel | AdapterKind::Bottleneck => {
                    if name.ends_with("down.w") || (name.ends_with("up.w") && !zero_out) {
                        Tensor::randn(&shape, init_std, &mut rng)
                    } else {
                        Tensor::zeros(&shape)
                    }
                }
                // A is scaled to the fan-in; B carries the zero init.
                AdapterKind::Lora if name.ends_with(".a") => {
                    Tensor::randn(&shape, 1.0 / (hidden_dim as f64).sqrt(), &mut rng)
                }
                AdapterKind::Lora if zero_out => Tensor::zeros(&shape),
                AdapterKind::Lora | AdapterKind::Prefix => Tensor::randn(&shape, init_std, &mut rng),
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            config,
            tensors,
            source_architecture_id: architecture_id.to_string(),
            source_hidden_dim: hidden_dim,
            source_num_layers: num_layers,
            source_provenance: Vec::new(),
            trained_stages: Vec::new(),
            training_hash: None,
        })
    }

    /// Checks that every tensor has the shape dictated by the config.
    pub fn validate_shapes(&self) -> Result<()> {
        let expected = self.config.shapes(self.source_hidden_dim, self.source_num_layers)?;
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "adapter has {} tensors, config implies {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.tensors.expect(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "adapter tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.num_params()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.source_architecture_id == other.source_architecture_id
            && self.source_hidden_dim == other.source_hidden_dim
            && self.source_num_layers == other.source_num_layers
            && self.tensors.bit_eq(&other.tensors)
    }
}

/// Creates a fresh adapter on `state`.
pub fn attach<T: Scalar>(state: &EncoderState<T>, cfg: AdapterConfig, rng_seed: u64) -> Result<EncoderState<T>> {
    if state.adapter.is_some() {
        return Err(Error::Config("encoder already has an adapter attached".into()));
    }
    let c = &state.config;
    let mut weights =
        AdapterWeights::init(cfg, &c.architecture_id, c.hidden_dim, c.num_layers, c.init_std, rng_seed)?;
    weights.source_provenance = state.provenance.stages();
    let mut out = state.clone();
    out.adapter = Some(weights);
    Ok(out)
}

/// Self-contained copy of the attached adapter.
pub fn export_adapter<T: Scalar>(state: &EncoderState<T>) -> Result<AdapterWeights<T>> {
    state
        .adapter
        .clone()
        .ok_or_else(|| Error::Config("encoder has no adapter to export".into()))
}

/// Inserts `w` into a backbone of the same architecture, appending the adapter's
/// training stages to the encoder's provenance.
pub fn import_adapter<T: Scalar>(state: &EncoderState<T>, w: &AdapterWeights<T>) -> Result<EncoderState<T>> {
    import_adapter_with_warnings(state, w).map(|(s, _)| s)
}

/// Like [`import_adapter`], also returning non-fatal compatibility warnings.
pub fn import_adapter_with_warnings<T: Scalar>(
    state: &EncoderState<T>,
    w: &AdapterWeights<T>,
) -> Result<(EncoderState<T>, Vec<String>)> {
    if state.adapter.is_some() {
        return Err(Error::Config("encoder already has an adapter attached".into()));
    }
    let c = &state.config;
    if w.source_architecture_id != c.architecture_id
        || w.source_hidden_dim != c.hidden_dim
        || w.source_num_layers != c.num_layers
    {
        return Err(Error::Portability {
            adapter: format!(
                "{} (hidden_dim {}, {} layers)",
                w.source_architecture_id, w.source_hidden_dim, w.source_num_layers
            ),
            encoder: format!("{} (hidden_dim {}, {} layers)", c.architecture_id, c.hidden_dim, c.num_layers),
        });
    }
    w.validate_shapes()?;
    let mut warnings = Vec::new();
    if w.trained_stages.is_empty() {
        warnings.push("adapter has not been trained; it contributes its initial values only".to_string());
    }
    if w.training_hash.is_none() && !w.trained_stages.is_empty() {
        warnings.push("adapter carries no training-config hash".to_string());
    }
    for msg in &warnings {
        log::warn!("{msg}");
    }
    let mut out = state.clone();
    for stage in &w.trained_stages {
        out.provenance.push(*stage, format!("{:?} adapter", w.config.kind).to_lowercase());
    }
    out.adapter = Some(w.clone());
    Ok((out, warnings))
}

/// Removes and returns the adapter, leaving the bare backbone.
pub fn detach<T: Scalar>(state: &EncoderState<T>) -> (EncoderState<T>, Option<AdapterWeights<T>>) {
    let mut out = state.clone();
    let w = out.adapter.take();
    (out, w)
}
