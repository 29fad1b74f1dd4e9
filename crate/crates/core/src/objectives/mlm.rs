use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StepOutcome;
use crate::autograd::{Graph, Var};
use crate::encoder::tokenizer::{is_special, MASK, NUM_SPECIAL};
use crate::encoder::{hidden_states, EncoderState, ForwardCtx, TokenBatch, HEAD_PREFIX};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Label value for positions that do not contribute to the loss.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    MaskToken,
    RandomToken,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    /// Share of selected positions replaced by the mask token.
    pub mask_token_frac: f64,
    /// Share of selected positions replaced by a random lexicon token.
    pub random_token_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { mask_prob: 0.15, mask_token_frac: 0.8, random_token_frac: 0.1 }
    }
}

impl MaskingConfig {
    pub fn with_prob(mask_prob: f64) -> Self {
        Self { mask_prob, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !unit(self.mask_prob) || !unit(self.mask_token_frac) || !unit(self.random_token_frac) {
            return Err(Error::Config("masking probabilities must lie in [0, 1]".into()));
        }
        if self.mask_token_frac + self.random_token_frac > 1.0 + 1e-12 {
            return Err(Error::Config("mask and random token shares exceed 1".into()));
        }
        Ok(())
    }
}

/// Which flat batch positions were selected and what happened to each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub rng_seed: u64,
}

/// Selects non-special, unmasked positions independently with `mask_prob`, then
/// corrupts each by the configured mask/random/keep split. Returns the plan, the
/// corrupted batch and one label per position (original id or [`IGNORE_INDEX`]).
pub fn plan_mlm_mask(
    batch: &TokenBatch,
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng_seed: u64,
) -> Result<(MaskingPlan, TokenBatch, Vec<i64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut corrupted = batch.clone();
    let mut labels = vec![IGNORE_INDEX; batch.token_ids.len()];
    let mut plan = MaskingPlan { positions: Vec::new(), actions: Vec::new(), rng_seed };
    for (i, (&id, &m)) in batch.token_ids.iter().zip(&batch.attention_mask).enumerate() {
        if m == 0 || is_special(id) {
            continue;
        }
        // one draw for selection and one for the action keeps streams aligned across configs
        let select = rng.gen::<f64>();
        let branch = rng.gen::<f64>();
        let replacement = rng.gen_range(NUM_SPECIAL..vocab_size);
        if select >= cfg.mask_prob {
            continue;
        }
        let action = if branch < cfg.mask_token_frac {
            MaskAction::MaskToken
        } else if branch < cfg.mask_token_frac + cfg.random_token_frac {
            MaskAction::RandomToken
        } else {
            MaskAction::Keep
        };
        corrupted.token_ids[i] = match action {
            MaskAction::MaskToken => MASK,
            MaskAction::RandomToken => replacement,
            MaskAction::Keep => id,
        };
        labels[i] = id as i64;
        plan.positions.push(i);
        plan.actions.push(action);
    }
    Ok((plan, corrupted, labels))
}

/// Mean cross-entropy of `logits [N, V]` over rows whose label is not ignored.
pub fn mlm_loss<T: Scalar>(logits: &Tensor<T>, labels: &[i64]) -> Result<StepOutcome<T>> {
    let [n, v] = logits.shape() else {
        return Err(Error::Shape("masked-LM logits must be a matrix".into()));
    };
    if labels.len() != *n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    let rows: Vec<usize> = (0..*n).filter(|&i| labels[i] != IGNORE_INDEX).collect();
    if rows.is_empty() {
        return Ok(StepOutcome::SkipBatch);
    }
    let targets = targets(labels, &rows, *v)?;
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let picked = g.gather_rows(x, &rows);
    let loss = g.cross_entropy(picked, &targets);
    Ok(StepOutcome::Loss(g.value(loss).data()[0]))
}

fn targets(labels: &[i64], rows: &[usize], vocab: usize) -> Result<Vec<usize>> {
    rows.iter()
        .map(|&i| {
            usize::try_from(labels[i])
                .ok()
                .filter(|&t| t < vocab)
                .ok_or_else(|| Error::Shape(format!("label {} outside vocabulary", labels[i])))
        })
        .collect()
}

/// Vocabulary logits for hidden states `h [N, D]`: dense, GELU, norm, then the
/// transposed word embeddings plus an output bias.
pub fn mlm_logits<T: Scalar>(ctx: &mut ForwardCtx<T>, state: &EncoderState<T>, h: Var) -> Result<Var> {
    let h = ctx.linear(state, &format!("{HEAD_PREFIX}mlm.dense"), h)?;
    let h = ctx.graph.gelu(h);
    let h = ctx.layer_norm(state, &format!("{HEAD_PREFIX}mlm.ln"), h)?;
    let word = ctx.param(state, "embeddings.word")?;
    let logits = ctx.graph.matmul(h, word, true);
    let bias = ctx.param(state, &format!("{HEAD_PREFIX}mlm.bias"))?;
    Ok(ctx.graph.add_row(logits, bias))
}

/// Corrupts `batch`, runs the encoder and returns the masked-LM loss node.
pub fn mlm_step<T: Scalar>(
    ctx: &mut ForwardCtx<T>,
    state: &EncoderState<T>,
    batch: &TokenBatch,
    cfg: &MaskingConfig,
    rng_seed: u64,
) -> Result<StepOutcome<Var>> {
    let batch = batch.truncated(state.config.max_seq_len);
    let (_, corrupted, labels) = plan_mlm_mask(&batch, cfg, state.config.vocab_size, rng_seed)?;
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE_INDEX).collect();
    if rows.is_empty() {
        return Ok(StepOutcome::SkipBatch);
    }
    let targets = targets(&labels, &rows, state.config.vocab_size)?;
    let (h, _) = hidden_states(ctx, state, &corrupted)?;
    let picked = ctx.graph.gather_rows(h, &rows);
    let logits = mlm_logits(ctx, state, picked)?;
    Ok(StepOutcome::Loss(ctx.graph.cross_entropy(logits, &targets)))
}
