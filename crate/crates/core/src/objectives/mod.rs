//! Training losses: cosine pair regression, multiple negatives ranking, masked
//! language modelling, denoising auto-encoding and dropout-view contrast.
//!
//! Each loss exists twice: a value-level function over plain embeddings, and a
//! graph builder used by the training loops.

mod mlm;
mod tsdae;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{pooled, EncoderState, ForwardCtx, SentenceEmbedding, TokenBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use mlm::{mlm_logits, mlm_loss, mlm_step, plan_mlm_mask, MaskAction, MaskingConfig, MaskingPlan, IGNORE_INDEX};
pub use tsdae::{ensure_tsdae_decoder, kept_len, tsdae_noise, tsdae_step, NoisyBatch, TSDAE_PREFIX};

/// Result of a training step that may legitimately have nothing to learn from.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome<L> {
    Loss(L),
    /// The batch carries no training signal (for example no masked position).
    SkipBatch,
}

impl<L> StepOutcome<L> {
    pub fn loss(self) -> Option<L> {
        match self {
            StepOutcome::Loss(l) => Some(l),
            StepOutcome::SkipBatch => None,
        }
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, StepOutcome::SkipBatch)
    }
}

/// K embedding pairs with optional binary similarity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T> {
    pub left: Vec<SentenceEmbedding<T>>,
    pub right: Vec<SentenceEmbedding<T>>,
    pub labels: Option<Vec<u8>>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(left: Vec<SentenceEmbedding<T>>, right: Vec<SentenceEmbedding<T>>, labels: Option<Vec<u8>>) -> Result<Self> {
        if left.is_empty() || left.len() != right.len() {
            return Err(Error::Shape(format!("pair batch needs K >= 1 pairs, got {} and {}", left.len(), right.len())));
        }
        if let Some(y) = &labels {
            if y.len() != left.len() || y.iter().any(|&v| v > 1) {
                return Err(Error::Shape("pair labels must be one 0/1 value per pair".into()));
            }
        }
        let d = left[0].dim();
        if left.iter().chain(&right).any(|e| e.dim() != d) {
            return Err(Error::Shape("pair batch embeddings differ in dimension".into()));
        }
        Ok(Self { left, right, labels })
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    fn matrices(&self) -> (Tensor<T>, Tensor<T>) {
        let d = self.left[0].dim();
        let flat = |v: &[SentenceEmbedding<T>]| {
            Tensor::new(vec![v.len(), d], v.iter().flat_map(|e| e.vector.iter().copied()).collect())
                .expect("validated dimensions")
        };
        (flat(&self.left), flat(&self.right))
    }
}

/// How per-pair residuals `y - cos` are reduced over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairReduction {
    #[default]
    MeanSquared,
    MeanAbsolute,
}

fn check_nonzero_rows<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    let d = *t.shape().last().expect("matrix");
    if t.data().chunks(d).any(|r| r.iter().all(|&v| v == T::zero())) {
        return Err(Error::Degenerate("zero-norm embedding in loss input".into()));
    }
    Ok(())
}

/// Pair regression loss on graph nodes `u, v: [K, D]`.
pub fn cosine_pair_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    v: Var,
    labels: &[u8],
    reduction: PairReduction,
) -> Result<Var> {
    check_nonzero_rows(g.value(u))?;
    check_nonzero_rows(g.value(v))?;
    let k = g.value(u).shape()[0];
    if labels.len() != k {
        return Err(Error::Shape(format!("{} labels for {k} pairs", labels.len())));
    }
    let nu = g.normalize_rows(u);
    let nv = g.normalize_rows(v);
    let prod = g.mul(nu, nv);
    let cos = g.sum_rows(prod);
    let y = g.constant(Tensor::new(vec![k], labels.iter().map(|&l| T::of(l as f64)).collect())?);
    let r = g.sub(y, cos);
    let per_pair = match reduction {
        PairReduction::MeanSquared => g.mul(r, r),
        PairReduction::MeanAbsolute => g.abs(r),
    };
    Ok(g.mean(per_pair))
}

/// Mean squared residual between labels and pair cosines.
pub fn cosine_pair_loss<T: Scalar>(b: &PairBatch<T>) -> Result<T> {
    cosine_pair_loss_with(b, PairReduction::MeanSquared)
}

pub fn cosine_pair_loss_with<T: Scalar>(b: &PairBatch<T>, reduction: PairReduction) -> Result<T> {
    let labels = b
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("cosine pair loss needs labelled pairs".into()))?;
    let (l, r) = b.matrices();
    let mut g = Graph::new();
    let (u, v) = (g.constant(l), g.constant(r));
    let loss = cosine_pair_loss_graph(&mut g, u, v, labels, reduction)?;
    Ok(g.value(loss).data()[0])
}

/// In-batch-negatives ranking loss on graph nodes `x, y: [K, D]`: cross-entropy
/// of each row of `scale · cos(x_i, y_j)` against the diagonal.
pub fn mnrl_loss_graph<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, scale: f64) -> Result<Var> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("ranking loss scale {scale} must be finite and > 0")));
    }
    check_nonzero_rows(g.value(x))?;
    check_nonzero_rows(g.value(y))?;
    let k = g.value(x).shape()[0];
    if g.value(y).shape()[0] != k {
        return Err(Error::Shape("ranking loss needs equally many anchors and positives".into()));
    }
    let nx = g.normalize_rows(x);
    let ny = g.normalize_rows(y);
    let sims = g.matmul(nx, ny, true);
    let scores = g.scale(sims, T::of(scale));
    let targets: Vec<usize> = (0..k).collect();
    Ok(g.cross_entropy(scores, &targets))
}

pub fn mnrl_loss<T: Scalar>(b: &PairBatch<T>, scale: f64) -> Result<T> {
    let (l, r) = b.matrices();
    let mut g = Graph::new();
    let (x, y) = (g.constant(l), g.constant(r));
    let loss = mnrl_loss_graph(&mut g, x, y, scale)?;
    Ok(g.value(loss).data()[0])
}

/// Encodes `batch` twice under independent dropout masks and contrasts the two
/// views with the ranking loss. `ctx` must carry a dropout seed unless `dropout_p` is 0.
pub fn simcse_step<T: Scalar>(
    ctx: &mut ForwardCtx<T>,
    state: &EncoderState<T>,
    batch: &TokenBatch,
    dropout_p: f64,
    scale: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Config(format!("dropout {dropout_p} outside [0, 1)")));
    }
    if dropout_p == 0.0 {
        log::warn!("contrastive dropout step with p = 0: both views are identical");
    } else if !ctx.is_stochastic() {
        return Err(Error::Config("dropout views need a training context with a dropout seed".into()));
    }
    ctx.set_dropout(dropout_p);
    let a = pooled(ctx, state, batch)?;
    let b = pooled(ctx, state, batch)?;
    mnrl_loss_graph(&mut ctx.graph, a, b, scale)
}

#[cfg(test)]
mod tests;
