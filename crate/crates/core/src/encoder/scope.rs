use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, EncoderState, ADAPTER_PREFIX, HEAD_PREFIX};
use crate::adapters::AdapterConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which encoder parameters a training stage may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    None,
    Adapter,
    Transformer,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Scope::None),
            "adapter" => Ok(Scope::Adapter),
            "transformer" | "backbone" => Ok(Scope::Transformer),
            "all" => Ok(Scope::All),
            other => Err(Error::Config(format!("unknown tunable scope `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Transformer,
    Adapter,
    /// Training-only heads (masked-LM head, denoising decoder).
    Head,
}

/// Fully qualified names of trainable tensors with their element counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableManifest {
    entries: BTreeMap<String, (Partition, usize)>,
}

impl TrainableManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|(_, n)| n).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &String> {
        self.entries.iter().filter(move |(_, (q, _))| *q == p).map(|(n, _)| n)
    }

    /// Adds training-head tensors under the [`Partition::Head`] partition.
    pub fn with_heads<T: Scalar>(mut self, state: &EncoderState<T>, prefix: &str) -> Self {
        for (name, t) in state.heads.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.entries.insert(format!("{HEAD_PREFIX}{name}"), (Partition::Head, t.numel()));
        }
        self
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().map(|(k, v)| (k.clone(), *v)));
        Self { entries }
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.entries.keys().all(|k| !other.entries.contains_key(k))
    }
}

pub fn select_trainable<T: Scalar>(state: &EncoderState<T>, scope: Scope) -> Result<TrainableManifest> {
    if matches!(scope, Scope::Adapter | Scope::All) && state.adapter.is_none() {
        return Err(Error::Config(format!("scope {scope:?} requires an attached adapter")));
    }
    let mut entries = BTreeMap::new();
    if matches!(scope, Scope::Transformer | Scope::All) {
        for (name, t) in state.weights.iter() {
            entries.insert(name.clone(), (Partition::Transformer, t.numel()));
        }
    }
    if matches!(scope, Scope::Adapter | Scope::All) {
        let adapter = state.adapter.as_ref().expect("checked above");
        for (name, t) in adapter.tensors.iter() {
            entries.insert(format!("{ADAPTER_PREFIX}{name}"), (Partition::Adapter, t.numel()));
        }
    }
    Ok(TrainableManifest { entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub transformer: usize,
    pub adapter: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.transformer + self.adapter
    }

    pub fn adapter_fraction(&self) -> f64 {
        self.adapter as f64 / self.total() as f64
    }
}

/// Parameter counts from shapes alone, without allocating the weights.
pub fn parameter_counts(arch: &ArchitectureConfig, adapter: Option<&AdapterConfig>) -> Result<ParamCounts> {
    let transformer = arch
        .backbone_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let adapter = match adapter {
        Some(cfg) => cfg.num_params(arch.hidden_dim, arch.num_layers)?,
        None => 0,
    };
    Ok(ParamCounts { transformer, adapter })
}
