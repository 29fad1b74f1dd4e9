//! Training-stage runners: domain-adaptive pre-training, sentence-embedding
//! pre-training, strategy composition, few-shot fine-tuning and self-training.

mod compose;
mod dapt;
mod selftrain;
mod sept;
mod setfit;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::autograd::Var;
use crate::encoder::{EncoderState, ForwardCtx, StageTag, TrainableManifest};
use crate::error::{Error, Result};
use crate::objectives::{MaskingConfig, StepOutcome};
use crate::optim::{AdamW, OptimConfig};
use crate::scalar::Scalar;

pub use compose::{compose, Artifact, ArtifactKey, ArtifactRegistry, Builder, StageRecord, StrategyId};
pub use dapt::run_dapt;
pub use selftrain::{run_self_training, self_train_rows, PseudoLabel, SelfTrainOutput, SelfTrainingConfig};
pub use sept::{run_sept, SeptOutput};
pub use setfit::{run_setfit, SetFitConfig, SetFitModel};

/// Unsupervised objective of a domain-adaptation stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Mlm,
    Tsdae,
    Simcse,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlm" => Ok(Self::Mlm),
            "tsdae" => Ok(Self::Tsdae),
            "simcse" => Ok(Self::Simcse),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::Mlm => "mlm",
            Self::Tsdae => "tsdae",
            Self::Simcse => "simcse",
        }
    }
}

mod defaults {
    pub fn scale() -> f64 {
        20.0
    }
    pub fn deletion() -> f64 {
        0.6
    }
    pub fn views_dropout() -> f64 {
        0.1
    }
    pub fn yes() -> bool {
        true
    }
}

/// Configuration of one DAPT or SEPT stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    pub batch_size: usize,
    /// Falls back to the stage default for full or adapter training.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// Train only a freshly attached adapter (or the one already attached).
    #[serde(default)]
    pub peft: Option<AdapterConfig>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default = "defaults::deletion")]
    pub deletion_ratio: f64,
    /// Dropout rate of the two contrastive views.
    #[serde(default = "defaults::views_dropout")]
    pub views_dropout: f64,
    /// Similarity scale of the ranking loss.
    #[serde(default = "defaults::scale")]
    pub mnrl_scale: f64,
    /// Architecture dropout during training.
    #[serde(default = "defaults::yes")]
    pub train_dropout: bool,
    #[serde(default)]
    pub warmup_frac: Option<f64>,
}

impl StageConfig {
    fn base(objective: Objective, steps: Option<usize>, epochs: Option<usize>, batch_size: usize) -> Self {
        Self {
            objective,
            steps,
            epochs,
            batch_size,
            learning_rate: None,
            peft: None,
            rng_seed: 0,
            masking: MaskingConfig::default(),
            deletion_ratio: defaults::deletion(),
            views_dropout: defaults::views_dropout(),
            mnrl_scale: defaults::scale(),
            train_dropout: true,
            warmup_frac: None,
        }
    }

    /// Masked-LM adaptation: 2344 steps at batch 256.
    pub fn dapt() -> Self {
        Self::base(Objective::Mlm, Some(2344), None, 256)
    }

    /// One epoch of ranking loss at batch 64.
    pub fn sept() -> Self {
        Self::base(Objective::Mlm, None, Some(1), 64)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = Some(steps);
        self.epochs = None;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = Some(epochs);
        self.steps = None;
        self
    }

    pub fn with_peft(mut self, peft: AdapterConfig) -> Self {
        self.peft = Some(peft);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_some() == self.epochs.is_some() {
            return Err(Error::Config("set exactly one of `steps` and `epochs`".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Some(p) = &self.peft {
            p.validate()?;
        }
        self.masking.validate()?;
        if !(0.0..1.0).contains(&self.deletion_ratio) {
            return Err(Error::Config("deletion ratio must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate for `stage`, trained fully or through an adapter.
    pub fn resolved_lr(&self, stage: StageTag, adapter_only: bool) -> f64 {
        if let Some(lr) = self.learning_rate {
            return lr;
        }
        match (stage, adapter_only, self.objective) {
            (_, true, _) => 1e-4,
            (StageTag::Dapt, false, Objective::Mlm) => 5e-5,
            (StageTag::Dapt, false, Objective::Tsdae) => 3e-5,
            (StageTag::Dapt, false, Objective::Simcse) => 1e-2,
            _ => 2e-5,
        }
    }

    fn optim(&self, stage: StageTag, adapter_only: bool) -> OptimConfig {
        let mut cfg = OptimConfig::with_lr(self.resolved_lr(stage, adapter_only));
        if let Some(w) = self.warmup_frac {
            cfg.warmup_frac = w;
        }
        cfg
    }
}

/// What happened during a training stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    pub skipped: usize,
    /// Loss before each applied update.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Index batches covering `n` items: a fresh shuffle per epoch, either `epochs`
/// passes or `steps` batches in total.
pub(crate) fn batch_plan(n: usize, batch_size: usize, steps: Option<usize>, epochs: Option<usize>, seed: u64) -> Vec<Vec<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_epoch = n.div_ceil(batch_size);
    let wanted = match (steps, epochs) {
        (Some(s), _) => s,
        (None, Some(e)) => e * per_epoch,
        (None, None) => 0,
    };
    let mut out = Vec::with_capacity(wanted);
    while out.len() < wanted {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for chunk in perm.chunks(batch_size) {
            if out.len() == wanted {
                break;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

pub(crate) fn step_seed(seed: u64, step: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

/// Runs `total_steps` optimisation steps over the parameters in `trainable`.
/// `loss_fn` builds the loss for one batch inside a fresh context.
pub(crate) fn train_loop<T, F>(
    state: &mut EncoderState<T>,
    trainable: &TrainableManifest,
    optim: OptimConfig,
    total_steps: usize,
    dropout_seed: Option<u64>,
    mut loss_fn: F,
) -> Result<TrainLog>
where
    T: Scalar,
    F: FnMut(&mut ForwardCtx<T>, &EncoderState<T>, usize) -> Result<StepOutcome<Var>>,
{
    let start = Instant::now();
    let mut opt = AdamW::new(optim, total_steps)?;
    let mut log = TrainLog::default();
    for step in 0..total_steps {
        let seed = dropout_seed.map(|s| step_seed(s, step, 0xD80));
        let mut ctx = ForwardCtx::training(trainable.names().cloned(), seed);
        let loss = match loss_fn(&mut ctx, state, step)? {
            StepOutcome::Loss(l) => l,
            StepOutcome::SkipBatch => {
                log.skipped += 1;
                continue;
            }
        };
        let value = ctx.graph.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Degenerate(format!("non-finite loss at step {step}")));
        }
        let grads = ctx.gradients(loss);
        drop(ctx);
        opt.step(state, grads)?;
        log.losses.push(value);
        log.steps += 1;
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

fn stage_detail(what: &str, log: &TrainLog, adapter_only: bool) -> String {
    let target = if adapter_only { "adapter" } else { "backbone" };
    format!("{what} {} steps, {target}", log.steps + log.skipped)
}

#[cfg(test)]
mod tests;
