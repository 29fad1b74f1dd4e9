use super::{batch_plan, stage_detail, step_seed, train_loop, Objective, StageConfig, TrainLog};
use crate::adapters::attach;
use crate::encoder::{select_trainable, EncoderState, Scope, StageTag};
use crate::error::{Error, Result};
use crate::hashing::short_hash;
use crate::objectives::{ensure_tsdae_decoder, mlm_step, simcse_step, tsdae_step, StepOutcome, TSDAE_PREFIX};
use crate::scalar::Scalar;

/// Continues training `base` on unlabelled in-domain text. With `cfg.peft` set
/// the backbone stays frozen and only a newly attached adapter (plus the
/// objective's head) is trained.
pub fn run_dapt<T: Scalar>(base: &EncoderState<T>, corpus: &[String], cfg: &StageConfig) -> Result<(EncoderState<T>, TrainLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("domain-adaptation corpus is empty".into()));
    }
    let plan = batch_plan(corpus.len(), cfg.batch_size, cfg.steps, cfg.epochs, cfg.rng_seed);
    if plan.is_empty() {
        return Ok((base.clone(), TrainLog::default()));
    }
    let adapter_only = cfg.peft.is_some();
    let mut state = match &cfg.peft {
        Some(p) => attach(base, p.clone(), cfg.rng_seed)?,
        None => base.clone(),
    };
    let head_prefix = match cfg.objective {
        Objective::Mlm => Some("mlm."),
        Objective::Tsdae => {
            ensure_tsdae_decoder(&mut state, step_seed(cfg.rng_seed, 0, 0x75DA));
            Some(TSDAE_PREFIX)
        }
        Objective::Simcse => None,
    };
    let scope = if adapter_only { Scope::Adapter } else { Scope::Transformer };
    let mut trainable = select_trainable(&state, scope)?;
    if let Some(prefix) = head_prefix {
        trainable = trainable.with_heads(&state, prefix);
    }
    let tok = state.tokenizer();
    let max_len = state.config.max_seq_len;
    let dropout_seed = (cfg.train_dropout || cfg.objective == Objective::Simcse).then_some(cfg.rng_seed);
    let optim = cfg.optim(StageTag::Dapt, adapter_only);
    let log = train_loop(&mut state, &trainable, optim, plan.len(), dropout_seed, |ctx, st, step| {
        let texts: Vec<&str> = plan[step].iter().map(|&i| corpus[i].as_str()).collect();
        let batch = tok.batch(&texts, max_len)?;
        let seed = step_seed(cfg.rng_seed, step, 0x3A5C);
        match cfg.objective {
            Objective::Mlm => mlm_step(ctx, st, &batch, &cfg.masking, seed),
            Objective::Tsdae => tsdae_step(ctx, st, &batch, cfg.deletion_ratio, seed),
            Objective::Simcse => simcse_step(ctx, st, &batch, cfg.views_dropout, cfg.mnrl_scale).map(StepOutcome::Loss),
        }
    })?;
    state.provenance.push(StageTag::Dapt, stage_detail(cfg.objective.as_str(), &log, adapter_only));
    if let Some(a) = state.adapter.as_mut().filter(|_| adapter_only) {
        a.trained_stages.push(StageTag::Dapt);
        a.training_hash = Some(short_hash(cfg)?);
    }
    Ok((state, log))
}
