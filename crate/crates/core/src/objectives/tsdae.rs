use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::StepOutcome;
use crate::autograd::{AttnMask, Var};
use crate::encoder::forward::{attention, feed_forward, AttnHooks};
use crate::encoder::tokenizer::{is_special, CLS, PAD, SEP};
use crate::encoder::{init_tensor, pooled, EncoderState, ForwardCtx, TokenBatch, HEAD_PREFIX};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Head namespace of the denoising decoder.
pub const TSDAE_PREFIX: &str = "tsdae.";

/// Inputs for one denoising step, restricted to rows long enough to corrupt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoisyBatch {
    /// Indices into the original batch of the rows kept.
    pub rows: Vec<usize>,
    /// `[CLS, kept…, SEP]` per row.
    pub noisy: TokenBatch,
    /// `[CLS, t1…tn]` per row; the decoder predicts `[t1…tn, SEP]`.
    pub decoder_input: TokenBatch,
    /// One target id per unmasked decoder position, in row-major order.
    pub targets: Vec<usize>,
}

/// Number of content tokens kept out of `len` at deletion ratio `ratio`.
pub fn kept_len(len: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * len as f64).round() as usize).clamp(1, len.max(1))
}

/// Deletes `ratio` of every row's content tokens. Rows with fewer than two content
/// tokens carry nothing to reconstruct from and are dropped; `None` when no row remains.
pub fn tsdae_noise(batch: &TokenBatch, ratio: f64, rng_seed: u64) -> Result<Option<NoisyBatch>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("deletion ratio {ratio} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut rows = Vec::new();
    let mut noisy_rows = Vec::new();
    let mut content_rows = Vec::new();
    for r in 0..batch.batch {
        let content: Vec<usize> = batch
            .row_ids(r)
            .iter()
            .zip(batch.row_mask(r))
            .filter(|&(&id, &m)| m == 1 && !is_special(id))
            .map(|(&id, _)| id)
            .collect();
        if content.len() < 2 {
            continue;
        }
        let mut keep = sample(&mut rng, content.len(), kept_len(content.len(), ratio)).into_vec();
        keep.sort_unstable();
        let mut noisy = vec![CLS];
        noisy.extend(keep.iter().map(|&i| content[i]));
        noisy.push(SEP);
        rows.push(r);
        noisy_rows.push(noisy);
        content_rows.push(content);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let noisy = pad(&noisy_rows)?;
    let dec_rows: Vec<Vec<usize>> = content_rows
        .iter()
        .map(|c| std::iter::once(CLS).chain(c.iter().copied()).collect())
        .collect();
    let decoder_input = pad(&dec_rows)?;
    let targets = content_rows
        .iter()
        .flat_map(|c| c.iter().copied().chain(std::iter::once(SEP)))
        .collect();
    Ok(Some(NoisyBatch { rows, noisy, decoder_input, targets }))
}

fn pad(rows: &[Vec<usize>]) -> Result<TokenBatch> {
    let seq = rows.iter().map(Vec::len).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(rows.len() * seq);
    let mut mask = Vec::with_capacity(rows.len() * seq);
    for r in rows {
        ids.extend(r.iter().copied().chain(std::iter::repeat(PAD).take(seq - r.len())));
        mask.extend((0..seq).map(|i| u8::from(i < r.len())));
    }
    TokenBatch::new(ids, mask, rows.len(), seq)
}

fn decoder_shapes(d: usize, f: usize, v: usize, layers: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        (format!("{TSDAE_PREFIX}embed_ln.gamma"), vec![d]),
        (format!("{TSDAE_PREFIX}embed_ln.beta"), vec![d]),
        (format!("{TSDAE_PREFIX}bias"), vec![v]),
    ];
    for l in 0..layers {
        let p = format!("{TSDAE_PREFIX}layers.{l}.");
        for block in ["self", "cross"] {
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}{block}.{proj}.w"), vec![d, d]));
                out.push((format!("{p}{block}.{proj}.b"), vec![d]));
            }
            out.push((format!("{p}{block}_ln.gamma"), vec![d]));
            out.push((format!("{p}{block}_ln.beta"), vec![d]));
        }
        out.push((format!("{p}ffn.up.w"), vec![d, f]));
        out.push((format!("{p}ffn.up.b"), vec![f]));
        out.push((format!("{p}ffn.down.w"), vec![f, d]));
        out.push((format!("{p}ffn.down.b"), vec![d]));
        out.push((format!("{p}ffn_ln.gamma"), vec![d]));
        out.push((format!("{p}ffn_ln.beta"), vec![d]));
    }
    out
}

/// Adds a decoder with the encoder's depth and width to the training heads, if
/// not present. Its input and output embeddings are the encoder's word embeddings.
pub fn ensure_tsdae_decoder<T: Scalar>(state: &mut EncoderState<T>, seed: u64) {
    let c = &state.config;
    let shapes = decoder_shapes(c.hidden_dim, c.ffn_dim, c.vocab_size, c.num_layers);
    if shapes.iter().all(|(n, _)| state.heads.contains(n)) {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape) in shapes {
        let t = init_tensor(&name, &shape, state.config.init_std, &mut rng);
        state.heads.insert(name, t);
    }
}

/// Deletes tokens, encodes the noisy text to one vector, and returns the
/// cross-entropy of reconstructing the original from that vector alone.
pub fn tsdae_step<T: Scalar>(
    ctx: &mut ForwardCtx<T>,
    state: &EncoderState<T>,
    batch: &TokenBatch,
    deletion_ratio: f64,
    rng_seed: u64,
) -> Result<StepOutcome<Var>> {
    if !state.heads.contains(&format!("{TSDAE_PREFIX}bias")) {
        return Err(Error::Config("denoising decoder missing; call ensure_tsdae_decoder first".into()));
    }
    let batch = batch.truncated(state.config.max_seq_len.saturating_sub(2).max(2));
    let Some(nb) = tsdae_noise(&batch, deletion_ratio, rng_seed)? else {
        return Ok(StepOutcome::SkipBatch);
    };
    let sentence = pooled(ctx, state, &nb.noisy)?;

    let dec = &nb.decoder_input;
    let (b, s) = (dec.batch, dec.seq);
    let heads = state.config.num_heads;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let word = ctx.param(state, "embeddings.word")?;
    let pos = ctx.param(state, "embeddings.position")?;
    let we = ctx.graph.embedding(word, &dec.token_ids);
    let pe = ctx.graph.embedding(pos, &positions);
    let x = ctx.graph.add(we, pe);
    let hp = format!("{HEAD_PREFIX}{TSDAE_PREFIX}");
    let x = ctx.layer_norm(state, &format!("{hp}embed_ln"), x)?;
    let mut x = ctx.dropout(x, state.config.dropout);

    let key_valid: Vec<bool> = dec.attention_mask.iter().map(|&m| m == 1).collect();
    let causal = Arc::new(AttnMask { key_valid, batch: b, keys: s, heads, causal_offset: Some(0) });
    let cross = Arc::new(AttnMask { key_valid: vec![true; b], batch: b, keys: 1, heads, causal_offset: None });
    let hooks = AttnHooks::default();
    for l in 0..state.config.num_layers {
        let p = format!("{hp}layers.{l}");
        let a = attention(ctx, state, &format!("{p}.self"), x, x, b, s, s, &causal, &hooks)?;
        let a = ctx.dropout(a, state.config.dropout);
        let a = ctx.graph.add(x, a);
        let a = ctx.layer_norm(state, &format!("{p}.self_ln"), a)?;
        let c = attention(ctx, state, &format!("{p}.cross"), a, sentence, b, s, 1, &cross, &hooks)?;
        let c = ctx.dropout(c, state.config.dropout);
        let c = ctx.graph.add(a, c);
        let c = ctx.layer_norm(state, &format!("{p}.cross_ln"), c)?;
        let f = feed_forward(ctx, state, &format!("{p}.ffn"), c)?;
        let f = ctx.dropout(f, state.config.dropout);
        let f = ctx.graph.add(c, f);
        x = ctx.layer_norm(state, &format!("{p}.ffn_ln"), f)?;
    }
    let valid: Vec<usize> = (0..b * s).filter(|&i| dec.attention_mask[i] == 1).collect();
    let h = ctx.graph.gather_rows(x, &valid);
    let logits = ctx.graph.matmul(h, word, true);
    let bias = ctx.param(state, &format!("{hp}bias"))?;
    let logits = ctx.graph.add_row(logits, bias);
    Ok(StepOutcome::Loss(ctx.graph.cross_entropy(logits, &nb.targets)))
}
