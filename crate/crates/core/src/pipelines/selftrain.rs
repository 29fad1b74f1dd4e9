use serde::{Deserialize, Serialize};

use crate::encoder::{encode_texts, EncoderState};
use crate::error::{Error, Result};
use crate::head::{to_f64, HeadConfig, LogisticHead};
use crate::pairgen::FewShotSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfTrainingConfig {
    /// An item is pseudo-labelled once its top class probability exceeds this.
    pub threshold: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub head: HeadConfig,
}

impl Default for SelfTrainingConfig {
    fn default() -> Self {
        Self { threshold: 0.9, max_iter: 10, head: HeadConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Index into the unlabelled pool.
    pub index: usize,
    pub label: usize,
    /// 1-based iteration in which the item was added.
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainOutput {
    pub head: LogisticHead,
    /// In the order they were added.
    pub pseudo: Vec<PseudoLabel>,
    pub iterations: usize,
}

/// Self-training on precomputed embeddings. `clf` must be the head fit on the
/// gold rows alone; it is returned unchanged if nothing crosses the threshold.
pub fn self_train_rows(
    clf: &LogisticHead,
    gold_x: &[Vec<f64>],
    gold_y: &[usize],
    unlabeled: &[Vec<f64>],
    cfg: &SelfTrainingConfig,
) -> Result<SelfTrainOutput> {
    if !(cfg.threshold > 0.0 && cfg.threshold.is_finite()) {
        return Err(Error::Config(format!("self-training threshold {} must lie in (0, inf)", cfg.threshold)));
    }
    let mut head = clf.clone();
    let mut pseudo: Vec<PseudoLabel> = Vec::new();
    let mut taken = vec![false; unlabeled.len()];
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        let fresh: Vec<PseudoLabel> = unlabeled
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .filter_map(|(index, x)| {
                let p = head.predict_proba(x);
                let label = head.predict(x);
                (p[label] > cfg.threshold).then_some(PseudoLabel { index, label, iteration: it })
            })
            .collect();
        if fresh.is_empty() {
            break;
        }
        iterations = it;
        for p in &fresh {
            taken[p.index] = true;
        }
        pseudo.extend(fresh);
        let mut x = gold_x.to_vec();
        let mut y = gold_y.to_vec();
        for p in &pseudo {
            x.push(unlabeled[p.index].clone());
            y.push(p.label);
        }
        head = LogisticHead::fit_rows(&x, &y, clf.num_classes, &cfg.head)?;
    }
    Ok(SelfTrainOutput { head, pseudo, iterations })
}

/// Embeds the shots and the unlabelled texts once with the frozen `enc`, then
/// self-trains the head.
pub fn run_self_training<T: Scalar, S: AsRef<str>>(
    clf: &LogisticHead,
    enc: &EncoderState<T>,
    fs: &FewShotSet,
    unlabeled: &[S],
    cfg: &SelfTrainingConfig,
) -> Result<SelfTrainOutput> {
    let embed = |texts: &[&str]| -> Result<Vec<Vec<f64>>> { Ok(encode_texts(enc, texts, 64)?.iter().map(to_f64).collect()) };
    let gold = embed(&fs.texts())?;
    let pool: Vec<&str> = unlabeled.iter().map(AsRef::as_ref).collect();
    let pool = if pool.is_empty() { Vec::new() } else { embed(&pool)? };
    self_train_rows(clf, &gold, &fs.labels(), &pool, cfg)
}
