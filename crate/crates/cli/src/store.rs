//! Artifact-store layout:
//!
//! ```text
//! store/base/                         base encoder
//! store/sept/                         fully trained SEPT encoder
//! store/dapt/<dataset>/               DAPT-ed backbones
//! store/adapters/<name>/              portable adapters
//! store/composed/<strategy>-<dataset>/
//! store/setfit/<model>-<dataset>-<seed>/
//! results/<strategy>/<dataset>/<seed>.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sentadapt::data::{load_dataset, load_pairs, PairStream};
use sentadapt::encoder::{ArchitectureConfig, EncoderState};
use sentadapt::evalharness::TaskData;
use sentadapt::pipelines::ArtifactKey;

use crate::config::RunConfig;
use crate::Failure;

pub type Enc = EncoderState<f32>;

pub const UNLABELED: &str = "unlabeled.txt";

pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.store_root() }
    }

    pub fn path(&self, key: &ArtifactKey) -> PathBuf {
        self.root.join(key.store_path())
    }

    pub fn composed(&self, strategy: &str, dataset: &str) -> PathBuf {
        self.root.join("composed").join(format!("{}-{dataset}", strategy.to_lowercase()))
    }

    /// Loads `store/base`, creating it from the `[base]` section if absent.
    pub fn base(&self, cfg: &RunConfig) -> Result<Enc, Failure> {
        let dir = self.path(&ArtifactKey::Base);
        if dir.join("manifest.json").is_file() {
            return Ok(Enc::load(&dir)?);
        }
        let arch = ArchitectureConfig::profile(&cfg.base.profile)?;
        let enc = Enc::init(arch, cfg.base.pooling, cfg.base.seed)?;
        save_encoder(&enc, &dir, cfg)?;
        log::info!("initialised base encoder at {}", dir.display());
        Ok(enc)
    }
}

pub fn load_encoder(dir: &Path) -> Result<Enc, Failure> {
    if !dir.join("manifest.json").is_file() {
        return Err(Failure::Validation(format!("no encoder checkpoint at {}", dir.display())));
    }
    Ok(Enc::load(dir)?)
}

pub fn save_encoder(enc: &Enc, dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    enc.save(dir)?;
    cfg.write_to(dir)
}

pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<(), Failure> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<S: serde::de::DeserializeOwned>(path: &Path) -> Result<S, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

/// A dataset directory plus its unlabelled corpus: `unlabeled.txt` when
/// present, otherwise the training texts.
pub fn load_task(cfg: &RunConfig, name: &str) -> Result<TaskData, Failure> {
    let dir = cfg.data_root().join(name);
    let (dataset, report) = load_dataset(&dir, None)?;
    if report.malformed > 0 {
        log::warn!("{name}: skipped {} malformed rows", report.malformed);
    }
    let unl = dir.join(UNLABELED);
    if unl.is_file() {
        let unlabeled = fs::read_to_string(&unl)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
        Ok(TaskData { dataset, unlabeled })
    } else {
        Ok(TaskData::from_dataset(dataset))
    }
}

pub fn pairs(cfg: &RunConfig) -> Result<PairStream, Failure> {
    let (p, report) = load_pairs(&cfg.pairs_path())?;
    if report.malformed > 0 {
        log::warn!("pairs: skipped {} malformed rows", report.malformed);
    }
    Ok(p)
}
