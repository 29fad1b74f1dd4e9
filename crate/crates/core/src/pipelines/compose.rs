use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{run_dapt, run_sept, StageConfig, TrainLog};
use crate::adapters::{export_adapter, import_adapter, AdapterConfig, AdapterWeights};
use crate::data::PairStream;
use crate::encoder::{EncoderState, StageTag};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The eight encoder variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyId {
    Base,
    Sept,
    Dapt,
    DaptThenSept,
    /// DAPT backbone plus an adapter trained once on the base model.
    Adasent,
    /// DAPT backbone plus an adapter trained on that backbone.
    DaptThenSeptAda,
    SeptThenDapt,
    /// SEPT backbone plus a DAPT adapter trained on it.
    SeptThenDaptAda,
}

impl StrategyId {
    pub const ALL: [StrategyId; 8] = [
        Self::Base,
        Self::Sept,
        Self::Dapt,
        Self::DaptThenSept,
        Self::Adasent,
        Self::DaptThenSeptAda,
        Self::SeptThenDapt,
        Self::SeptThenDaptAda,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "BASE",
            Self::Sept => "SEPT",
            Self::Dapt => "DAPT",
            Self::DaptThenSept => "DAPT_THEN_SEPT",
            Self::Adasent => "ADASENT",
            Self::DaptThenSeptAda => "DAPT_THEN_SEPT_ADA",
            Self::SeptThenDapt => "SEPT_THEN_DAPT",
            Self::SeptThenDaptAda => "SEPT_THEN_DAPT_ADA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }

    /// Training stages after BASE, in the order they shape the final encoder.
    pub fn stages(self) -> &'static [StageTag] {
        match self {
            Self::Base => &[],
            Self::Sept => &[StageTag::Sept],
            Self::Dapt => &[StageTag::Dapt],
            Self::DaptThenSept | Self::Adasent | Self::DaptThenSeptAda => &[StageTag::Dapt, StageTag::Sept],
            Self::SeptThenDapt | Self::SeptThenDaptAda => &[StageTag::Sept, StageTag::Dapt],
        }
    }

    /// Artifacts assembled into the encoder for `dataset`.
    pub fn artifacts(self, dataset: &str) -> Vec<ArtifactKey> {
        let d = || dataset.to_string();
        match self {
            Self::Base => vec![ArtifactKey::Base],
            Self::Sept => vec![ArtifactKey::Sept],
            Self::Dapt => vec![ArtifactKey::Dapt { dataset: d() }],
            Self::DaptThenSept => vec![ArtifactKey::DaptSept { dataset: d() }],
            Self::Adasent => vec![ArtifactKey::Dapt { dataset: d() }, ArtifactKey::SeptAdapter],
            Self::DaptThenSeptAda => vec![ArtifactKey::Dapt { dataset: d() }, ArtifactKey::DaptSeptAdapter { dataset: d() }],
            Self::SeptThenDapt => vec![ArtifactKey::SeptDapt { dataset: d() }],
            Self::SeptThenDaptAda => vec![ArtifactKey::Sept, ArtifactKey::SeptDaptAdapter { dataset: d() }],
        }
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A trained (or base) artifact in the reuse graph. Keys without a dataset
/// are shared by every task.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArtifactKey {
    Base,
    /// Full SEPT on the base model.
    Sept,
    /// SEPT adapter trained on the frozen base model.
    SeptAdapter,
    /// Full DAPT of the base model on one dataset.
    Dapt { dataset: String },
    /// Full SEPT on a DAPT backbone.
    DaptSept { dataset: String },
    /// SEPT adapter trained on a frozen DAPT backbone.
    DaptSeptAdapter { dataset: String },
    /// Full DAPT on the SEPT model.
    SeptDapt { dataset: String },
    /// DAPT adapter trained on the frozen SEPT model.
    SeptDaptAdapter { dataset: String },
}

impl ArtifactKey {
    pub fn dataset(&self) -> Option<&str> {
        match self {
            Self::Base | Self::Sept | Self::SeptAdapter => None,
            Self::Dapt { dataset }
            | Self::DaptSept { dataset }
            | Self::DaptSeptAdapter { dataset }
            | Self::SeptDapt { dataset }
            | Self::SeptDaptAdapter { dataset } => Some(dataset),
        }
    }

    pub fn is_shared(&self) -> bool {
        self.dataset().is_none()
    }

    pub fn is_adapter(&self) -> bool {
        matches!(self, Self::SeptAdapter | Self::DaptSeptAdapter { .. } | Self::SeptDaptAdapter { .. })
    }

    /// Training stage that produces the artifact.
    pub fn stage(&self) -> StageTag {
        match self {
            Self::Base => StageTag::Base,
            Self::Sept | Self::SeptAdapter | Self::DaptSept { .. } | Self::DaptSeptAdapter { .. } => StageTag::Sept,
            Self::Dapt { .. } | Self::SeptDapt { .. } | Self::SeptDaptAdapter { .. } => StageTag::Dapt,
        }
    }

    /// The encoder the producing stage starts from.
    pub fn parent(&self) -> Option<ArtifactKey> {
        match self {
            Self::Base => None,
            Self::Sept | Self::SeptAdapter | Self::Dapt { .. } => Some(Self::Base),
            Self::DaptSept { dataset } | Self::DaptSeptAdapter { dataset } => Some(Self::Dapt { dataset: dataset.clone() }),
            Self::SeptDapt { .. } | Self::SeptDaptAdapter { .. } => Some(Self::Sept),
        }
    }

    /// Relative store path, e.g. `dapt/<dataset>` or `adapters/sept`.
    pub fn store_path(&self) -> String {
        match self {
            Self::Base => "base".into(),
            Self::Sept => "sept".into(),
            Self::SeptAdapter => "adapters/sept".into(),
            Self::Dapt { dataset } => format!("dapt/{dataset}"),
            Self::DaptSept { dataset } => format!("dapt-sept/{dataset}"),
            Self::DaptSeptAdapter { dataset } => format!("adapters/dapt-sept-{dataset}"),
            Self::SeptDapt { dataset } => format!("sept-dapt/{dataset}"),
            Self::SeptDaptAdapter { dataset } => format!("adapters/sept-dapt-{dataset}"),
        }
    }
}

impl fmt::Display for ArtifactKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.store_path())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Artifact<T> {
    Encoder(EncoderState<T>),
    Adapter(AdapterWeights<T>),
}

#[derive(Clone, Debug, Default)]
pub struct ArtifactRegistry<T> {
    items: BTreeMap<ArtifactKey, Artifact<T>>,
}

impl<T: Scalar> ArtifactRegistry<T> {
    pub fn new() -> Self {
        Self { items: BTreeMap::new() }
    }

    pub fn with_base(base: EncoderState<T>) -> Self {
        let mut r = Self::new();
        r.insert(ArtifactKey::Base, Artifact::Encoder(base));
        r
    }

    pub fn insert(&mut self, key: ArtifactKey, artifact: Artifact<T>) {
        self.items.insert(key, artifact);
    }

    pub fn contains(&self, key: &ArtifactKey) -> bool {
        self.items.contains_key(key)
    }

    pub fn get(&self, key: &ArtifactKey) -> Option<&Artifact<T>> {
        self.items.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ArtifactKey> {
        self.items.keys()
    }

    pub fn encoder(&self, key: &ArtifactKey) -> Option<&EncoderState<T>> {
        match self.items.get(key)? {
            Artifact::Encoder(e) => Some(e),
            Artifact::Adapter(_) => None,
        }
    }

    pub fn adapter(&self, key: &ArtifactKey) -> Option<&AdapterWeights<T>> {
        match self.items.get(key)? {
            Artifact::Adapter(a) => Some(a),
            Artifact::Encoder(_) => None,
        }
    }
}

/// Assembles the encoder for `strategy` on `dataset` from stored artifacts.
/// No training happens here.
pub fn compose<T: Scalar>(strategy: StrategyId, dataset: &str, registry: &ArtifactRegistry<T>) -> Result<EncoderState<T>> {
    let missing = |key: &ArtifactKey| Error::MissingArtifact { strategy: strategy.to_string(), stage: key.to_string() };
    let keys = strategy.artifacts(dataset);
    let encoder = |k: &ArtifactKey| registry.encoder(k).ok_or_else(|| missing(k));
    let adapter = |k: &ArtifactKey| registry.adapter(k).ok_or_else(|| missing(k));
    match keys.as_slice() {
        [k] => Ok(encoder(k)?.clone()),
        [backbone, ada] => import_adapter(encoder(backbone)?, adapter(ada)?),
        _ => unreachable!("strategies use one or two artifacts"),
    }
}

/// One executed training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifact: ArtifactKey,
    pub stage: StageTag,
    pub shared: bool,
    pub steps: usize,
    pub seconds: f64,
}

/// Trains missing artifacts on demand, each exactly once, and records every
/// stage it runs.
#[derive(Clone, Debug)]
pub struct Builder<T> {
    pub registry: ArtifactRegistry<T>,
    pub ledger: Vec<StageRecord>,
    /// Full-weight domain adaptation.
    pub dapt: StageConfig,
    /// Adapter-only domain adaptation.
    pub dapt_peft: StageConfig,
    /// Full-weight sentence-embedding training.
    pub sept: StageConfig,
    /// Adapter-only sentence-embedding training.
    pub sept_peft: StageConfig,
}

impl<T: Scalar> Builder<T> {
    /// PEFT stage configs copy `dapt` / `sept` with `adapter` attached.
    pub fn new(base: EncoderState<T>, dapt: StageConfig, sept: StageConfig, adapter: AdapterConfig) -> Self {
        let dapt_peft = dapt.clone().with_peft(adapter.clone());
        let sept_peft = sept.clone().with_peft(adapter);
        Self { registry: ArtifactRegistry::with_base(base), ledger: Vec::new(), dapt, dapt_peft, sept, sept_peft }
    }

    /// Number of recorded runs of `stage`.
    pub fn runs(&self, stage: StageTag) -> usize {
        self.ledger.iter().filter(|r| r.stage == stage).count()
    }

    fn encoder(&self, key: &ArtifactKey) -> Result<&EncoderState<T>> {
        self.registry.encoder(key).ok_or_else(|| Error::MissingArtifact {
            strategy: "build".into(),
            stage: key.to_string(),
        })
    }

    /// Makes sure `key` exists, training it (and its parents) if needed.
    /// `corpus` is the unlabelled text of the key's dataset.
    pub fn ensure(&mut self, key: &ArtifactKey, corpus: &[String], pairs: &PairStream) -> Result<()> {
        if self.registry.contains(key) {
            return Ok(());
        }
        let parent = key.parent().ok_or_else(|| Error::MissingArtifact {
            strategy: "build".into(),
            stage: key.to_string(),
        })?;
        self.ensure(&parent, corpus, pairs)?;
        let from = self.encoder(&parent)?;
        let (artifact, log): (Artifact<T>, TrainLog) = match key {
            ArtifactKey::Base => unreachable!("base has no parent"),
            ArtifactKey::Sept | ArtifactKey::DaptSept { .. } => {
                let (out, log) = run_sept(from, pairs, &self.sept)?;
                (Artifact::Encoder(out.into_encoder()?), log)
            }
            ArtifactKey::SeptAdapter | ArtifactKey::DaptSeptAdapter { .. } => {
                let (out, log) = run_sept(from, pairs, &self.sept_peft)?;
                (Artifact::Adapter(out.into_adapter()?), log)
            }
            ArtifactKey::Dapt { .. } | ArtifactKey::SeptDapt { .. } => {
                let (out, log) = run_dapt(from, corpus, &self.dapt)?;
                (Artifact::Encoder(out), log)
            }
            ArtifactKey::SeptDaptAdapter { .. } => {
                let (out, log) = run_dapt(from, corpus, &self.dapt_peft)?;
                (Artifact::Adapter(export_adapter(&out)?), log)
            }
        };
        log::info!("trained {key} in {} steps ({:.2}s)", log.steps, log.seconds);
        self.ledger.push(StageRecord {
            artifact: key.clone(),
            stage: key.stage(),
            shared: key.is_shared(),
            steps: log.steps,
            seconds: log.seconds,
        });
        self.registry.insert(key.clone(), artifact);
        Ok(())
    }

    /// Trains whatever `strategy` still needs for `dataset`, then composes it.
    pub fn build(&mut self, strategy: StrategyId, dataset: &str, corpus: &[String], pairs: &PairStream) -> Result<EncoderState<T>> {
        for key in strategy.artifacts(dataset) {
            self.ensure(&key, corpus, pairs)?;
        }
        compose(strategy, dataset, &self.registry)
    }
}
