use serde::{Deserialize, Serialize};

use super::{step_seed, train_loop, TrainLog};
use crate::encoder::{encode_texts, pooled, select_trainable, EncoderState, Scope, SentenceEmbedding, StageTag};
use crate::error::{Error, Result};
use crate::head::{to_f64, HeadConfig, LogisticHead};
use crate::objectives::{cosine_pair_loss_graph, PairReduction, StepOutcome};
use crate::optim::OptimConfig;
use crate::pairgen::{epoch_seed, generate_pairs, FewShotSet, PairStrategy};
use crate::scalar::Scalar;

mod defaults {
    pub fn epochs() -> usize {
        1
    }
    pub fn batch() -> usize {
        16
    }
    pub fn encode_batch() -> usize {
        64
    }
    pub fn yes() -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetFitConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch")]
    pub batch_size: usize,
    /// Defaults to 2e-5, or 1e-4 when only an adapter is tuned.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// Defaults to ALL with an adapter attached, TRANSFORMER otherwise.
    #[serde(default)]
    pub scope: Option<Scope>,
    #[serde(default)]
    pub pair_strategy: PairStrategy,
    #[serde(default)]
    pub reduction: PairReduction,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "defaults::yes")]
    pub train_dropout: bool,
    #[serde(default = "defaults::encode_batch")]
    pub encode_batch: usize,
}

impl Default for SetFitConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch(),
            learning_rate: None,
            scope: None,
            pair_strategy: PairStrategy::default(),
            reduction: PairReduction::default(),
            head: HeadConfig::default(),
            rng_seed: 0,
            train_dropout: true,
            encode_batch: defaults::encode_batch(),
        }
    }
}

impl SetFitConfig {
    pub fn resolved_scope<T: Scalar>(&self, enc: &EncoderState<T>) -> Scope {
        self.scope.unwrap_or(if enc.adapter.is_some() { Scope::All } else { Scope::Transformer })
    }
}

/// A fine-tuned encoder with its classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct SetFitModel<T> {
    pub encoder: EncoderState<T>,
    pub head: LogisticHead,
}

impl<T: Scalar> SetFitModel<T> {
    pub fn embed<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<SentenceEmbedding<T>>> {
        encode_texts(&self.encoder, texts, 64)
    }

    pub fn predict<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<usize>> {
        Ok(self.head.predict_embeddings(&self.embed(texts)?))
    }

    pub fn predict_proba<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<f64>>> {
        Ok(self.embed(texts)?.iter().map(|e| self.head.predict_proba(&to_f64(e))).collect())
    }
}

/// Contrastive fine-tuning on pairs generated from the shots (regenerated each
/// epoch), then a logistic-regression head on the frozen embeddings.
pub fn run_setfit<T: Scalar>(enc: &EncoderState<T>, fs: &FewShotSet, cfg: &SetFitConfig) -> Result<(SetFitModel<T>, TrainLog)> {
    if cfg.batch_size == 0 || cfg.encode_batch == 0 {
        return Err(Error::Config("batch sizes must be >= 1".into()));
    }
    let scope = cfg.resolved_scope(enc);
    let mut encoder = enc.clone();
    let mut log = TrainLog::default();
    if scope != Scope::None && cfg.epochs > 0 {
        let trainable = select_trainable(&encoder, scope)?;
        let mut batches = Vec::new();
        for e in 0..cfg.epochs {
            let pairs = generate_pairs(fs, cfg.pair_strategy, epoch_seed(cfg.rng_seed, e))?;
            batches.extend(pairs.chunks(cfg.batch_size).map(<[_]>::to_vec));
        }
        let lr = cfg.learning_rate.unwrap_or(if scope == Scope::Adapter { 1e-4 } else { 2e-5 });
        let tok = encoder.tokenizer();
        let max_len = encoder.config.max_seq_len;
        let dropout_seed = cfg.train_dropout.then(|| step_seed(cfg.rng_seed, 0, 0x5E7F));
        log = train_loop(&mut encoder, &trainable, OptimConfig::with_lr(lr), batches.len(), dropout_seed, |ctx, st, step| {
            let batch = &batches[step];
            let s1: Vec<&str> = batch.iter().map(|p| p.s1.as_str()).collect();
            let s2: Vec<&str> = batch.iter().map(|p| p.s2.as_str()).collect();
            let y: Vec<u8> = batch.iter().map(|p| p.y).collect();
            let u = pooled(ctx, st, &tok.batch(&s1, max_len)?)?;
            let v = pooled(ctx, st, &tok.batch(&s2, max_len)?)?;
            cosine_pair_loss_graph(&mut ctx.graph, u, v, &y, cfg.reduction).map(StepOutcome::Loss)
        })?;
        let what = format!("setfit {:?} {} steps", scope, log.steps).to_lowercase();
        encoder.provenance.push(StageTag::Setfit, what);
    }
    let x = encode_texts(&encoder, &fs.texts(), cfg.encode_batch)?;
    let head = LogisticHead::fit(&x, &fs.labels(), fs.num_classes(), &cfg.head)?;
    Ok((SetFitModel { encoder, head }, log))
}
