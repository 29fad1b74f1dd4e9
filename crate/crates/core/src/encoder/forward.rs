use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderState, Pooling, SentenceEmbedding, TokenBatch, ADAPTER_PREFIX};
use crate::adapters::{AdapterKind, AdapterWeights};
use crate::autograd::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One forward (and optionally backward) pass: the tape plus the parameters bound
/// into it. Parameters named in `trainable` become gradient-carrying leaves; the
/// rest are constants.
pub struct ForwardCtx<T> {
    pub graph: Graph<T>,
    bound: BTreeMap<String, Var>,
    trainable: BTreeSet<String>,
    rng: Option<ChaCha8Rng>,
    dropout_override: Option<f64>,
}

impl<T: Scalar> ForwardCtx<T> {
    /// No trainable parameters, no dropout.
    pub fn inference() -> Self {
        Self { graph: Graph::new(), bound: BTreeMap::new(), trainable: BTreeSet::new(), rng: None, dropout_override: None }
    }

    /// Dropout is active iff `dropout_seed` is set.
    pub fn training<I, S>(trainable: I, dropout_seed: Option<u64>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            graph: Graph::new(),
            bound: BTreeMap::new(),
            trainable: trainable.into_iter().map(Into::into).collect(),
            rng: dropout_seed.map(ChaCha8Rng::seed_from_u64),
            dropout_override: None,
        }
    }

    /// Uses `p` instead of the architecture's dropout rate for every dropout site.
    pub fn set_dropout(&mut self, p: f64) {
        self.dropout_override = Some(p);
    }

    pub fn is_stochastic(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, state: &EncoderState<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = state
            .param(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
        let v = self.graph.leaf(t.clone(), self.trainable.contains(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let p = self.dropout_override.unwrap_or(p);
        match self.rng.as_mut() {
            Some(rng) if p > 0.0 => self.graph.dropout(x, p, rng),
            _ => x,
        }
    }

    /// `x·W + b` for parameters `{prefix}.w` / `{prefix}.b`.
    pub fn linear(&mut self, state: &EncoderState<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(state, &format!("{prefix}.w"))?;
        let b = self.param(state, &format!("{prefix}.b"))?;
        let y = self.graph.matmul(x, w, false);
        Ok(self.graph.add_row(y, b))
    }

    pub fn layer_norm(&mut self, state: &EncoderState<T>, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(state, &format!("{prefix}.gamma"))?;
        let b = self.param(state, &format!("{prefix}.beta"))?;
        Ok(self.graph.layer_norm(x, g, b, state.config.layer_norm_eps))
    }

    /// Gradients of `loss` for every bound trainable parameter.
    pub fn gradients(&self, loss: Var) -> BTreeMap<String, Vec<T>> {
        let mut grads = self.graph.backward(loss);
        self.bound
            .iter()
            .filter(|(name, _)| self.trainable.contains(*name))
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Adapter modifications applied inside an attention block.
#[derive(Default)]
pub(crate) struct AttnHooks {
    pub lora: Option<(String, f64)>,
    pub prefix: Option<String>,
}

/// Multi-head attention of `q_in [batch·q_len, D]` over `kv_in [batch·kv_len, D]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention<T: Scalar>(
    ctx: &mut ForwardCtx<T>,
    state: &EncoderState<T>,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    batch: usize,
    q_len: usize,
    kv_len: usize,
    mask: &Arc<AttnMask>,
    hooks: &AttnHooks,
) -> Result<Var> {
    let heads = state.config.num_heads;
    let mut q = ctx.linear(state, &format!("{prefix}.q"), q_in)?;
    let k = ctx.linear(state, &format!("{prefix}.k"), kv_in)?;
    let mut v = ctx.linear(state, &format!("{prefix}.v"), kv_in)?;
    if let Some((lora, scale)) = &hooks.lora {
        q = lora_branch(ctx, state, &format!("{lora}.q"), q_in, q, *scale)?;
        v = lora_branch(ctx, state, &format!("{lora}.v"), kv_in, v, *scale)?;
    }
    let qh = ctx.graph.split_heads(q, batch, q_len, heads);
    let mut kh = ctx.graph.split_heads(k, batch, kv_len, heads);
    let mut vh = ctx.graph.split_heads(v, batch, kv_len, heads);
    if let Some(pre) = &hooks.prefix {
        let pk = ctx.param(state, &format!("{pre}.key"))?;
        let pv = ctx.param(state, &format!("{pre}.value"))?;
        let pkh = ctx.graph.prefix_heads(pk, batch, heads);
        let pvh = ctx.graph.prefix_heads(pv, batch, heads);
        kh = ctx.graph.concat_seq(pkh, kh);
        vh = ctx.graph.concat_seq(pvh, vh);
    }
    let scores = ctx.graph.bmm(qh, kh, true);
    let scores = ctx.graph.scale(scores, T::of(1.0 / (state.config.head_dim() as f64).sqrt()));
    let probs = ctx.graph.masked_softmax(scores, mask);
    let ctx_h = ctx.graph.bmm(probs, vh, false);
    let merged = ctx.graph.merge_heads(ctx_h, batch, q_len, heads);
    ctx.linear(state, &format!("{prefix}.o"), merged)
}

fn lora_branch<T: Scalar>(
    ctx: &mut ForwardCtx<T>,
    state: &EncoderState<T>,
    name: &str,
    x: Var,
    base: Var,
    scale: f64,
) -> Result<Var> {
    let a = ctx.param(state, &format!("{name}.a"))?;
    let b = ctx.param(state, &format!("{name}.b"))?;
    let h = ctx.graph.matmul(x, a, true);
    let delta = ctx.graph.matmul(h, b, true);
    let delta = ctx.graph.scale(delta, T::of(scale));
    Ok(ctx.graph.add(base, delta))
}

/// `scale · up(relu(down(x)))`
fn bottleneck_branch<T: Scalar>(
    ctx: &mut ForwardCtx<T>,
    state: &EncoderState<T>,
    name: &str,
    x: Var,
    scale: f64,
) -> Result<Var> {
    let h = ctx.linear(state, &format!("{name}.down"), x)?;
    let h = ctx.graph.relu(h);
    let h = ctx.linear(state, &format!("{name}.up"), h)?;
    Ok(ctx.graph.scale(h, T::of(scale)))
}

pub(crate) fn feed_forward<T: Scalar>(
    ctx: &mut ForwardCtx<T>,
    state: &EncoderState<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = ctx.linear(state, &format!("{prefix}.up"), x)?;
    let h = ctx.graph.gelu(h);
    ctx.linear(state, &format!("{prefix}.down"), h)
}

fn encoder_layer<T: Scalar>(
    ctx: &mut ForwardCtx<T>,
    state: &EncoderState<T>,
    layer: usize,
    x: Var,
    batch: usize,
    seq: usize,
    masks: &LayerMasks,
) -> Result<Var> {
    let p = format!("layers.{layer}");
    let adapter: Option<&AdapterWeights<T>> = state.adapter.as_ref();
    let ap = format!("{ADAPTER_PREFIX}layers.{layer}");
    let mut hooks = AttnHooks::default();
    let mut mask = &masks.plain;
    if let Some(a) = adapter {
        match a.config.kind {
            AdapterKind::Lora => hooks.lora = Some((ap.clone(), a.config.branch_scale())),
            AdapterKind::Prefix => {
                hooks.prefix = Some(ap.clone());
                mask = masks.prefixed.as_ref().expect("prefix mask built for prefix adapters");
            }
            _ => {}
        }
    }
    let attn = attention(ctx, state, &format!("{p}.attn"), x, x, batch, seq, seq, mask, &hooks)?;
    let attn = ctx.dropout(attn, state.config.dropout);
    let a = ctx.graph.add(x, attn);
    let a = ctx.layer_norm(state, &format!("{p}.attn_ln"), a)?;

    let mut f = feed_forward(ctx, state, &format!("{p}.ffn"), a)?;
    if let Some(ad) = adapter {
        match ad.config.kind {
            AdapterKind::Parallel => {
                let branch = bottleneck_branch(ctx, state, &ap, a, ad.config.branch_scale())?;
                f = ctx.graph.add(f, branch);
            }
            AdapterKind::Bottleneck => {
                let branch = bottleneck_branch(ctx, state, &ap, f, ad.config.branch_scale())?;
                f = ctx.graph.add(f, branch);
            }
            _ => {}
        }
    }
    let f = ctx.dropout(f, state.config.dropout);
    let out = ctx.graph.add(a, f);
    ctx.layer_norm(state, &format!("{p}.ffn_ln"), out)
}

struct LayerMasks {
    plain: Arc<AttnMask>,
    prefixed: Option<Arc<AttnMask>>,
}

fn check_batch<T: Scalar>(state: &EncoderState<T>, batch: &TokenBatch) -> Result<TokenBatch> {
    if batch.token_ids.len() != batch.batch * batch.seq || batch.attention_mask.len() != batch.batch * batch.seq {
        return Err(Error::Shape("token batch buffers do not match its dimensions".into()));
    }
    let vocab = state.config.vocab_size;
    if let Some(&bad) = batch.token_ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Shape(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let b = batch.truncated(state.config.max_seq_len);
    // Re-validate: truncation may not drop every unmasked position of a row.
    TokenBatch::new(b.token_ids, b.attention_mask, b.batch, b.seq)
}

/// Final-layer token states `[batch·seq, D]` for an already length-checked batch.
fn run_layers<T: Scalar>(ctx: &mut ForwardCtx<T>, state: &EncoderState<T>, batch: &TokenBatch) -> Result<Var> {
    let (b, s) = (batch.batch, batch.seq);
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let word = ctx.param(state, "embeddings.word")?;
    let pos = ctx.param(state, "embeddings.position")?;
    let we = ctx.graph.embedding(word, &batch.token_ids);
    let pe = ctx.graph.embedding(pos, &positions);
    let x = ctx.graph.add(we, pe);
    let x = ctx.layer_norm(state, "embeddings.ln", x)?;
    let mut x = ctx.dropout(x, state.config.dropout);

    let key_valid: Vec<bool> = batch.attention_mask.iter().map(|&m| m == 1).collect();
    let heads = state.config.num_heads;
    let plain = Arc::new(AttnMask { key_valid: key_valid.clone(), batch: b, keys: s, heads, causal_offset: None });
    let prefixed = match state.adapter.as_ref().map(|a| &a.config) {
        Some(cfg) if cfg.kind == AdapterKind::Prefix => {
            let p = cfg.prefix_len.expect("validated prefix adapter");
            let mut kv = Vec::with_capacity(b * (p + s));
            for r in 0..b {
                kv.extend(std::iter::repeat(true).take(p));
                kv.extend_from_slice(&key_valid[r * s..(r + 1) * s]);
            }
            Some(Arc::new(AttnMask { key_valid: kv, batch: b, keys: p + s, heads, causal_offset: None }))
        }
        _ => None,
    };
    let masks = LayerMasks { plain, prefixed };
    for l in 0..state.config.num_layers {
        x = encoder_layer(ctx, state, l, x, b, s, &masks)?;
    }
    Ok(x)
}

/// Token states `[batch·seq, D]` together with the (possibly truncated) batch they belong to.
pub fn hidden_states<T: Scalar>(
    ctx: &mut ForwardCtx<T>,
    state: &EncoderState<T>,
    batch: &TokenBatch,
) -> Result<(Var, TokenBatch)> {
    let batch = check_batch(state, batch)?;
    let h = run_layers(ctx, state, &batch)?;
    Ok((h, batch))
}

pub(crate) fn pool_weights<T: Scalar>(pooling: Pooling, batch: &TokenBatch) -> Vec<T> {
    let mut w = vec![T::zero(); batch.batch * batch.seq];
    for r in 0..batch.batch {
        match pooling {
            Pooling::Mean => {
                let mask = batch.row_mask(r);
                let n = mask.iter().filter(|&&m| m == 1).count();
                let inv = T::one() / T::of(n as f64);
                for (s, &m) in mask.iter().enumerate() {
                    if m == 1 {
                        w[r * batch.seq + s] = inv;
                    }
                }
            }
            Pooling::Cls => w[r * batch.seq] = T::one(),
        }
    }
    w
}

/// Sentence embeddings `[batch, D]` as a graph node.
pub fn pooled<T: Scalar>(ctx: &mut ForwardCtx<T>, state: &EncoderState<T>, batch: &TokenBatch) -> Result<Var> {
    let (h, batch) = hidden_states(ctx, state, batch)?;
    let w = pool_weights(state.pooling, &batch);
    Ok(ctx.graph.weighted_pool(h, w, batch.batch, batch.seq))
}

/// Inference-mode sentence embeddings, one per row.
pub fn encode<T: Scalar>(state: &EncoderState<T>, batch: &TokenBatch) -> Result<Vec<SentenceEmbedding<T>>> {
    let mut ctx = ForwardCtx::inference();
    let v = pooled(&mut ctx, state, batch)?;
    let t = ctx.graph.value(v);
    Ok((0..batch.batch).map(|r| SentenceEmbedding::new(t.row(r).to_vec())).collect())
}

/// Tokenizes and encodes `texts` in chunks of `batch_size`.
pub fn encode_texts<T: Scalar, S: AsRef<str>>(
    state: &EncoderState<T>,
    texts: &[S],
    batch_size: usize,
) -> Result<Vec<SentenceEmbedding<T>>> {
    let tok = state.tokenizer();
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch_size.max(1)) {
        let batch = tok.batch(chunk, state.config.max_seq_len)?;
        out.extend(encode(state, &batch)?);
    }
    Ok(out)
}
