//! Transformer sentence encoder: architecture profiles, weights, provenance,
//! pooling, and cosine similarity.

mod checkpoint;
pub(crate) mod forward;
mod scope;
pub mod tokenizer;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterWeights;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub use checkpoint::{CheckpointManifest, CHECKPOINT_FORMAT};
pub use forward::{encode, encode_texts, hidden_states, pooled, ForwardCtx};
pub use scope::{parameter_counts, select_trainable, ParamCounts, Partition, Scope, TrainableManifest};
pub use tokenizer::{TokenBatch, Tokenizer};

/// Namespaces used in fully qualified parameter names.
pub const ADAPTER_PREFIX: &str = "adapter.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub architecture_id: String,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl ArchitectureConfig {
    /// Two-layer, 64-wide profile for CPU experiments.
    pub fn tiny() -> Self {
        Self {
            architecture_id: "tiny-roberta-l2-d64".into(),
            vocab_size: 1000,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 512,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// DistilRoBERTa-base dimensions.
    pub fn distilroberta() -> Self {
        Self {
            architecture_id: "distilroberta-base".into(),
            vocab_size: 50265,
            hidden_dim: 768,
            num_layers: 6,
            num_heads: 12,
            ffn_dim: 3072,
            max_seq_len: 512,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "distilroberta" | "full" => Ok(Self::distilroberta()),
            other => Err(Error::Config(format!("unknown architecture profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Backbone parameter names and shapes in storage order.
    pub fn backbone_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.hidden_dim, self.ffn_dim);
        let mut out = vec![
            ("embeddings.word".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position".to_string(), vec![self.max_seq_len, d]),
            ("embeddings.ln.gamma".to_string(), vec![d]),
            ("embeddings.ln.beta".to_string(), vec![d]),
        ];
        for l in 0..self.num_layers {
            let p = format!("layers.{l}.");
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}attn.{proj}.w"), vec![d, d]));
                out.push((format!("{p}attn.{proj}.b"), vec![d]));
            }
            out.push((format!("{p}attn_ln.gamma"), vec![d]));
            out.push((format!("{p}attn_ln.beta"), vec![d]));
            out.push((format!("{p}ffn.up.w"), vec![d, f]));
            out.push((format!("{p}ffn.up.b"), vec![f]));
            out.push((format!("{p}ffn.down.w"), vec![f, d]));
            out.push((format!("{p}ffn.down.b"), vec![d]));
            out.push((format!("{p}ffn_ln.gamma"), vec![d]));
            out.push((format!("{p}ffn_ln.beta"), vec![d]));
        }
        out
    }

    /// Masked-LM head shapes (dense + norm + output bias; the projection is tied
    /// to the word embeddings).
    pub fn mlm_head_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden_dim;
        vec![
            ("mlm.dense.w".into(), vec![d, d]),
            ("mlm.dense.b".into(), vec![d]),
            ("mlm.ln.gamma".into(), vec![d]),
            ("mlm.ln.beta".into(), vec![d]),
            ("mlm.bias".into(), vec![self.vocab_size]),
        ]
    }
}

/// Initial value for a parameter, chosen from its name.
pub(crate) fn init_tensor<T: Scalar>(name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    if name.ends_with(".gamma") {
        Tensor::full(shape, T::one())
    } else if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with("bias") {
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, std, rng)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StageTag {
    Base,
    Dapt,
    Sept,
    Setfit,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StageTag::Base => "BASE",
            StageTag::Dapt => "DAPT",
            StageTag::Sept => "SEPT",
            StageTag::Setfit => "SETFIT",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub stage: StageTag,
    /// Free-form description: objective, step count, which parameters were trained.
    #[serde(default)]
    pub detail: String,
}

/// Append-only record of the training stages applied to an encoder.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Provenance(Vec<ProvenanceEntry>);

impl Provenance {
    pub fn base() -> Self {
        Self(vec![ProvenanceEntry { stage: StageTag::Base, detail: String::new() }])
    }

    pub fn push(&mut self, stage: StageTag, detail: impl Into<String>) {
        self.0.push(ProvenanceEntry { stage, detail: detail.into() });
    }

    pub fn entries(&self) -> &[ProvenanceEntry] {
        &self.0
    }

    pub fn stages(&self) -> Vec<StageTag> {
        self.0.iter().map(|e| e.stage).collect()
    }

    pub fn is_prefix_of(&self, other: &Provenance) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T> {
    pub config: ArchitectureConfig,
    pub pooling: Pooling,
    pub weights: ParamStore<T>,
    /// Training-only heads (masked-LM head, denoising decoder). Never used by `encode`.
    pub heads: ParamStore<T>,
    pub adapter: Option<AdapterWeights<T>>,
    pub provenance: Provenance,
}

impl<T: Scalar> EncoderState<T> {
    /// Randomly initialized encoder with a masked-LM head; provenance `[BASE]`.
    pub fn init(config: ArchitectureConfig, pooling: Pooling, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ParamStore::new();
        for (name, shape) in config.backbone_shapes() {
            let t = init_tensor(&name, &shape, config.init_std, &mut rng);
            weights.insert(name, t);
        }
        let mut heads = ParamStore::new();
        for (name, shape) in config.mlm_head_shapes() {
            let t = init_tensor(&name, &shape, config.init_std, &mut rng);
            heads.insert(name, t);
        }
        Ok(Self { config, pooling, weights, heads, adapter: None, provenance: Provenance::base() })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.config.vocab_size).expect("validated vocabulary")
    }

    /// Resolves a fully qualified parameter name (`adapter.*`, `head.*`, or backbone).
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        if let Some(rest) = name.strip_prefix(ADAPTER_PREFIX) {
            self.adapter.as_ref().and_then(|a| a.tensors.get(rest))
        } else if let Some(rest) = name.strip_prefix(HEAD_PREFIX) {
            self.heads.get(rest)
        } else {
            self.weights.get(name)
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(rest) = name.strip_prefix(ADAPTER_PREFIX) {
            self.adapter.as_mut().and_then(|a| a.tensors.get_mut(rest))
        } else if let Some(rest) = name.strip_prefix(HEAD_PREFIX) {
            self.heads.get_mut(rest)
        } else {
            self.weights.get_mut(name)
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|(_, t)| t.is_finite())
            && self.adapter.as_ref().is_none_or(|a| a.tensors.iter().all(|(_, t)| t.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding<T> {
    pub vector: Vec<T>,
}

impl<T: Scalar> SentenceEmbedding<T> {
    pub fn new(vector: Vec<T>) -> Self {
        Self { vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> T {
        self.vector.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cos_sim<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cos_sim of lengths {} and {}", u.len(), v.len())));
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let nu = u.iter().map(|&a| a * a).sum::<T>().sqrt();
    let nv = v.iter().map(|&b| b * b).sum::<T>().sqrt();
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot / (nu * nv)).max(-T::one()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cos_sim_examples() {
        assert_eq!(cos_sim(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cos_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v: f64 = cos_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(cos_sim(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn cos_sim_is_symmetric_and_bounded(
            u in proptest::collection::vec(-10.0f64..10.0, 4),
            v in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let a = cos_sim(&u, &v).unwrap();
            let b = cos_sim(&v, &u).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn provenance_is_append_only() {
        let mut p = Provenance::base();
        let before = p.clone();
        p.push(StageTag::Dapt, "mlm");
        p.push(StageTag::Sept, "adapter");
        assert!(before.is_prefix_of(&p));
        assert_eq!(p.stages(), vec![StageTag::Base, StageTag::Dapt, StageTag::Sept]);
    }

    #[test]
    fn profiles_validate() {
        ArchitectureConfig::tiny().validate().unwrap();
        ArchitectureConfig::distilroberta().validate().unwrap();
        let mut bad = ArchitectureConfig::tiny();
        bad.num_heads = 3;
        assert!(bad.validate().is_err());
    }
}
