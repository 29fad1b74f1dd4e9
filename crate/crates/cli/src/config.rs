//! Run configuration: one TOML file whose sections are layered over the
//! built-in defaults, then overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sentadapt::adapters::{AdapterConfig, AdapterKind};
use sentadapt::data::SynthSpec;
use sentadapt::encoder::Pooling;
use sentadapt::evalharness::SigTest;
use sentadapt::hashing::config_hash;
use sentadapt::pipelines::{SelfTrainingConfig, SetFitConfig, StageConfig};

use crate::Failure;

pub const STORE_ENV: &str = "SENTADAPT_STORE";
pub const RESOLVED: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSection {
    /// `tiny` or `distilroberta`.
    pub profile: String,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for BaseSection {
    fn default() -> Self {
        Self { profile: "tiny".into(), pooling: Pooling::Mean, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding one sub-directory per dataset.
    pub root: Option<PathBuf>,
    /// Sentence pairs for SEPT; defaults to `<root>/pairs.jsonl`.
    pub pairs: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Shots per class.
    pub shots: usize,
    pub self_training: bool,
    pub significance: SigTest,
    /// Strategy every other strategy is tested against.
    pub baseline: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { shots: 8, self_training: false, significance: SigTest::PairedT, baseline: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Reported in the cost table; defaults to the DAPT step budget.
    pub dapt_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub store: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Worker threads for tensor kernels.
    pub threads: Option<usize>,
    pub base: BaseSection,
    pub data: DataSection,
    pub adapter: AdapterConfig,
    pub dapt: StageConfig,
    pub sept: StageConfig,
    pub setfit: SetFitConfig,
    pub selftrain: SelfTrainingConfig,
    pub eval: EvalSection,
    pub report: ReportSection,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            store: None,
            results: None,
            seeds: (0..5).collect(),
            threads: None,
            base: BaseSection::default(),
            data: DataSection::default(),
            adapter: AdapterConfig::parallel(),
            dapt: StageConfig::dapt(),
            sept: StageConfig::sept(),
            setfit: SetFitConfig::default(),
            selftrain: SelfTrainingConfig::default(),
            eval: EvalSection::default(),
            report: ReportSection::default(),
            synth: SynthSpec::default(),
        }
    }
}

fn merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) if !slot.is_null() => merge(slot, v),
                    _ => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Failure::Validation(format!("config: {e}")))?;
        let user = serde_json::to_value(user).map_err(|e| Failure::Validation(e.to_string()))?;
        let mut defaults = Self::default();
        // an adapter of another kind starts from that kind's defaults
        if let Some(kind) = user.pointer("/adapter/kind").and_then(Value::as_str) {
            defaults.adapter = AdapterConfig::default_for(AdapterKind::parse(kind)?);
        }
        let mut value = serde_json::to_value(&defaults).expect("defaults serialize");
        // naming one budget of a stage clears the default of the other
        for stage in ["dapt", "sept"] {
            let (steps, epochs) = match user.get(stage) {
                Some(s) => (s.get("steps").is_some(), s.get("epochs").is_some()),
                None => continue,
            };
            let slot = &mut value[stage];
            if steps && !epochs {
                slot["epochs"] = Value::Null;
            } else if epochs && !steps {
                slot["steps"] = Value::Null;
            }
        }
        merge(&mut value, user);
        serde_json::from_value(value).map_err(|e| Failure::Validation(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
            None => Ok(Self::default()),
        }
    }

    /// Flag, then config file, then `$SENTADAPT_STORE`, then `./store`.
    pub fn store_root(&self) -> PathBuf {
        self.store
            .clone()
            .or_else(|| std::env::var_os(STORE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("store"))
    }

    /// Defaults to `results/` beside the store.
    pub fn results_root(&self) -> PathBuf {
        self.results.clone().unwrap_or_else(|| {
            let store = self.store_root();
            store.parent().map(|p| p.join("results")).unwrap_or_else(|| PathBuf::from("results"))
        })
    }

    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.data.pairs.clone().unwrap_or_else(|| self.data_root().join("pairs.jsonl"))
    }

    pub fn peft(&self, kind: Option<&str>) -> Result<Option<AdapterConfig>, Failure> {
        Ok(match kind {
            None => None,
            Some(k) => {
                let kind = AdapterKind::parse(k)?;
                Some(if kind == self.adapter.kind { self.adapter.clone() } else { AdapterConfig::default_for(kind) })
            }
        })
    }

    pub fn hash(&self) -> Result<String, Failure> {
        Ok(config_hash(self)?)
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        // TOML has no null; round trip through JSON to drop unset options
        let mut v = serde_json::to_value(self).map_err(|e| Failure::Runtime(e.to_string()))?;
        strip_nulls(&mut v);
        toml::to_string_pretty(&v).map_err(|e| Failure::Runtime(format!("serializing config: {e}")))
    }

    /// Writes the resolved config into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), Failure> {
        fs::create_dir_all(dir)?;
        let text = format!("# config hash {}\n{}", self.hash()?, self.to_toml()?);
        fs::write(dir.join(RESOLVED), text)?;
        Ok(())
    }
}

fn strip_nulls(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|_, x| !x.is_null());
            m.values_mut().for_each(strip_nulls);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_override_only_what_they_name() {
        let c = RunConfig::parse("seeds = [1, 2]\n[dapt]\nsteps = 7\n[setfit]\nlearning_rate = 0.001\n").unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.dapt.steps, Some(7));
        assert_eq!(c.dapt.batch_size, 256);
        assert_eq!(c.setfit.learning_rate, Some(1e-3));
        assert_eq!(c.sept, StageConfig::sept());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[dapt]\nstepz = 1\n"), Err(Failure::Validation(_))));
        assert!(matches!(RunConfig::parse("colour = 1\n"), Err(Failure::Validation(_))));
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::parse("seeds = [3]\n[dapt]\nsteps = 5\nbatch_size = 4\n[eval]\nshots = 2\n").unwrap();
        let b = RunConfig::parse("[eval]\nshots = 2\n[dapt]\nbatch_size = 4\nsteps = 5\n[base]\nseed = 0\n").unwrap();
        assert_ne!(a, b);
        let b = RunConfig { seeds: vec![3], ..b };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::parse("[adapter]\nkind = \"lora\"\n[dapt]\nsteps = 3\n").unwrap();
        assert_eq!(c.adapter, AdapterConfig::lora());
        let text = c.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
    }
}
