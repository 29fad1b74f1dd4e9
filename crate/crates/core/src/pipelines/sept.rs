use super::{batch_plan, stage_detail, train_loop, StageConfig, TrainLog};
use crate::adapters::{attach, AdapterWeights};
use crate::data::PairStream;
use crate::encoder::{pooled, select_trainable, EncoderState, Scope, StageTag};
use crate::error::{Error, Result};
use crate::hashing::short_hash;
use crate::objectives::{mnrl_loss_graph, StepOutcome};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub enum SeptOutput<T> {
    /// Fully trained encoder.
    Encoder(EncoderState<T>),
    /// Adapter trained on a frozen backbone, detached from it.
    Adapter(AdapterWeights<T>),
}

impl<T: Scalar> SeptOutput<T> {
    pub fn into_encoder(self) -> Result<EncoderState<T>> {
        match self {
            Self::Encoder(e) => Ok(e),
            Self::Adapter(_) => Err(Error::Config("sentence-embedding stage produced an adapter, not an encoder".into())),
        }
    }

    pub fn into_adapter(self) -> Result<AdapterWeights<T>> {
        match self {
            Self::Adapter(a) => Ok(a),
            Self::Encoder(_) => Err(Error::Config("sentence-embedding stage produced an encoder, not an adapter".into())),
        }
    }
}

/// Trains on `(anchor, positive)` pairs with in-batch negatives. With
/// `cfg.peft` set a fresh adapter is trained on the frozen `base` and returned
/// on its own.
pub fn run_sept<T: Scalar>(base: &EncoderState<T>, pairs: &PairStream, cfg: &StageConfig) -> Result<(SeptOutput<T>, TrainLog)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("positive-pair stream is empty".into()));
    }
    let adapter_only = cfg.peft.is_some();
    let mut state = match &cfg.peft {
        Some(p) => attach(base, p.clone(), cfg.rng_seed)?,
        None => base.clone(),
    };
    let plan = batch_plan(pairs.len(), cfg.batch_size, cfg.steps, cfg.epochs, cfg.rng_seed);
    let scope = if adapter_only { Scope::Adapter } else { Scope::Transformer };
    let trainable = select_trainable(&state, scope)?;
    let tok = state.tokenizer();
    let max_len = state.config.max_seq_len;
    let dropout_seed = cfg.train_dropout.then_some(cfg.rng_seed);
    let optim = cfg.optim(StageTag::Sept, adapter_only);
    let log = train_loop(&mut state, &trainable, optim, plan.len(), dropout_seed, |ctx, st, step| {
        let (a, p): (Vec<&str>, Vec<&str>) =
            plan[step].iter().map(|&i| (pairs.pairs[i].0.as_str(), pairs.pairs[i].1.as_str())).unzip();
        let x = pooled(ctx, st, &tok.batch(&a, max_len)?)?;
        let y = pooled(ctx, st, &tok.batch(&p, max_len)?)?;
        mnrl_loss_graph(&mut ctx.graph, x, y, cfg.mnrl_scale).map(StepOutcome::Loss)
    })?;
    if plan.is_empty() {
        return Ok((if adapter_only { SeptOutput::Adapter(state.adapter.expect("attached")) } else { SeptOutput::Encoder(state) }, log));
    }
    if adapter_only {
        debug_assert!(state.weights.bit_eq(&base.weights));
        let mut adapter = state.adapter.take().expect("attached");
        adapter.trained_stages.push(StageTag::Sept);
        adapter.training_hash = Some(short_hash(cfg)?);
        Ok((SeptOutput::Adapter(adapter), log))
    } else {
        state.provenance.push(StageTag::Sept, stage_detail(&format!("mnrl on {}", pairs.source), &log, false));
        Ok((SeptOutput::Encoder(state), log))
    }
}
