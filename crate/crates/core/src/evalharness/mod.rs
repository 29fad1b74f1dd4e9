//! Multi-seed experiment matrices, accuracy aggregation, significance tests
//! and the training-cost ledger.

mod cost;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{sample_few_shot, Example, LabeledDataset, PairStream};
use crate::encoder::StageTag;
use crate::error::{Error, Result};
use crate::hashing::config_hash;
use crate::pipelines::{run_self_training, run_setfit, ArtifactKey, Builder, SelfTrainingConfig, SetFitConfig, SetFitModel, StrategyId};
use crate::scalar::Scalar;

pub use cost::{cost_report, shared_stages, write_cost_csv, CostPlan, CostRow};
pub use stats::{significance, SigTest};

/// Wall-clock seconds spent in each stage that produced a run's model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSeconds {
    pub dapt: f64,
    pub sept: f64,
    pub setfit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: StrategyId,
    pub dataset: String,
    pub seed: u64,
    pub accuracy: f64,
    pub stage_seconds: StageSeconds,
    pub config_hash: String,
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Config(format!("accuracy {} outside [0, 1]", self.accuracy)));
        }
        let s = self.stage_seconds;
        if [s.dapt, s.sept, s.setfit].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("stage times must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if gold.is_empty() || pred.len() != gold.len() {
        return Err(Error::Config(format!("{} predictions for {} test items", pred.len(), gold.len())));
    }
    Ok(pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64)
}

pub fn evaluate<T: Scalar>(model: &SetFitModel<T>, test: &[Example]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let texts: Vec<&str> = test.iter().map(|e| e.text.as_str()).collect();
    let gold: Vec<usize> = test.iter().map(|e| e.label).collect();
    accuracy(&model.predict(&texts)?, &gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub strategy: StrategyId,
    pub dataset: String,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<RunRecord>,
}

impl ResultTable {
    pub fn new(mut rows: Vec<RunRecord>) -> Self {
        rows.sort_by(|a, b| (a.strategy, &a.dataset, a.seed).cmp(&(b.strategy, &b.dataset, b.seed)));
        Self { rows }
    }

    fn groups(&self) -> BTreeMap<(StrategyId, &str), Vec<&RunRecord>> {
        let mut g: BTreeMap<(StrategyId, &str), Vec<&RunRecord>> = BTreeMap::new();
        for r in &self.rows {
            g.entry((r.strategy, r.dataset.as_str())).or_default().push(r);
        }
        g
    }

    /// Every (strategy, dataset) cell must aggregate the same seed set.
    pub fn check_seed_sets(&self) -> Result<()> {
        let mut seen: Option<BTreeSet<u64>> = None;
        for ((s, d), rs) in self.groups() {
            let seeds: BTreeSet<u64> = rs.iter().map(|r| r.seed).collect();
            if seeds.len() != rs.len() {
                return Err(Error::Config(format!("duplicate seeds in cell {s}/{d}")));
            }
            match &seen {
                Some(prev) if *prev != seeds => {
                    return Err(Error::Config(format!("cell {s}/{d} has seeds {seeds:?}, others {prev:?}")));
                }
                _ => seen = Some(seeds),
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellStats> {
        self.groups()
            .into_iter()
            .map(|((strategy, dataset), rs)| {
                let n = rs.len();
                let mean = rs.iter().map(|r| r.accuracy).sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (rs.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                CellStats { strategy, dataset: dataset.to_string(), mean, std, n_seeds: n }
            })
            .collect()
    }

    pub fn mean(&self, strategy: StrategyId, dataset: &str) -> Option<f64> {
        self.cells().into_iter().find(|c| c.strategy == strategy && c.dataset == dataset).map(|c| c.mean)
    }

    /// `(seed, accuracy)` pairs of one cell, by seed.
    pub fn accuracies(&self, strategy: StrategyId, dataset: &str) -> Vec<(u64, f64)> {
        let mut v: Vec<(u64, f64)> =
            self.rows.iter().filter(|r| r.strategy == strategy && r.dataset == dataset).map(|r| (r.seed, r.accuracy)).collect();
        v.sort_by_key(|(s, _)| *s);
        v
    }

    /// Seed-matched comparison of two strategies on one dataset.
    pub fn compare(&self, a: StrategyId, b: StrategyId, dataset: &str, test: SigTest) -> Result<f64> {
        let xa = self.accuracies(a, dataset);
        let xb: BTreeMap<u64, f64> = self.accuracies(b, dataset).into_iter().collect();
        let (va, vb): (Vec<f64>, Vec<f64>) = xa
            .iter()
            .map(|(s, acc)| xb.get(s).map(|o| (*acc, *o)).ok_or_else(|| Error::Config(format!("seed {s} missing for {b}"))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        if vb.len() != xb.len() {
            return Err(Error::Config(format!("{a} and {b} ran different seeds")));
        }
        significance(&va, &vb, test)
    }

    /// Columns: strategy, dataset, mean, std, n_seeds.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["strategy", "dataset", "mean", "std", "n_seeds"])?;
        for c in self.cells() {
            w.write_record([c.strategy.to_string(), c.dataset, c.mean.to_string(), c.std.to_string(), c.n_seeds.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads every `<strategy>/<dataset>/<seed>.json` below `root`.
    pub fn load(root: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for s in read_dirs(root)? {
            for d in read_dirs(&s)? {
                for entry in fs::read_dir(&d)? {
                    let p = entry?.path();
                    let is_record = p.extension().is_some_and(|e| e == "json")
                        && p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.parse::<u64>().is_ok());
                    if is_record {
                        rows.push(serde_json::from_str(&fs::read_to_string(&p)?)?);
                    }
                }
            }
        }
        Ok(Self::new(rows))
    }
}

fn read_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.is_dir() {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: StrategyId,
    pub dataset: String,
    pub seed: u64,
}

impl Cell {
    pub fn record_path(&self, results: &Path) -> PathBuf {
        results.join(self.strategy.as_str()).join(&self.dataset).join(format!("{}.json", self.seed))
    }

    fn error_path(&self, results: &Path) -> PathBuf {
        results.join(self.strategy.as_str()).join(&self.dataset).join(format!("{}.error.json", self.seed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutput {
    pub accuracy: f64,
    pub stage_seconds: StageSeconds,
}

/// Executes single matrix cells.
pub trait CellRunner {
    /// Hash of everything that determines the cell's result.
    fn config_hash(&self, cell: &Cell) -> Result<String>;
    fn run(&mut self, cell: &Cell) -> Result<CellOutput>;
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub strategies: Vec<StrategyId>,
    pub datasets: Vec<String>,
    pub seeds: Vec<u64>,
}

impl MatrixSpec {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            for dataset in &self.datasets {
                for &seed in &self.seeds {
                    out.push(Cell { strategy, dataset: dataset.clone(), seed });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixOutcome {
    pub table: ResultTable,
    pub executed: usize,
    pub cached: usize,
    pub failures: Vec<CellFailure>,
}

/// Runs the full cross product, persisting one record per cell under
/// `results`. Cells whose stored record carries the current config hash are
/// skipped; a failing cell is recorded and the matrix moves on.
pub fn run_matrix<R: CellRunner>(spec: &MatrixSpec, runner: &mut R, results: &Path) -> Result<MatrixOutcome> {
    let mut rows = Vec::new();
    let (mut executed, mut cached) = (0, 0);
    let mut failures = Vec::new();
    for cell in spec.cells() {
        let hash = runner.config_hash(&cell)?;
        let path = cell.record_path(results);
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(rec) = serde_json::from_str::<RunRecord>(&text) {
                if rec.config_hash == hash {
                    cached += 1;
                    rows.push(rec);
                    continue;
                }
            }
        }
        executed += 1;
        let outcome = runner.run(&cell).and_then(|out| {
            let rec = RunRecord {
                strategy: cell.strategy,
                dataset: cell.dataset.clone(),
                seed: cell.seed,
                accuracy: out.accuracy,
                stage_seconds: out.stage_seconds,
                config_hash: hash.clone(),
            };
            rec.validate()?;
            Ok(rec)
        });
        fs::create_dir_all(path.parent().expect("cell path has a parent"))?;
        match outcome {
            Ok(rec) => {
                let tmp = path.with_extension("json.tmp");
                fs::write(&tmp, serde_json::to_string_pretty(&rec)?)?;
                fs::rename(&tmp, &path)?;
                let _ = fs::remove_file(cell.error_path(results));
                rows.push(rec);
            }
            Err(e) => {
                log::error!("cell {}/{}/{} failed: {e}", cell.strategy, cell.dataset, cell.seed);
                let f = CellFailure { cell: cell.clone(), error: e.to_string() };
                fs::write(cell.error_path(results), serde_json::to_string_pretty(&f)?)?;
                failures.push(f);
            }
        }
    }
    let table = ResultTable::new(rows);
    if failures.is_empty() {
        table.check_seed_sets()?;
    }
    Ok(MatrixOutcome { table, executed, cached, failures })
}

/// One task's labelled data and its unlabelled adaptation corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub dataset: LabeledDataset,
    pub unlabeled: Vec<String>,
}

impl TaskData {
    /// The training split with labels discarded serves as the unlabelled corpus.
    pub fn from_dataset(dataset: LabeledDataset) -> Self {
        let unlabeled = dataset.unlabeled_texts();
        Self { dataset, unlabeled }
    }
}

/// Builds each cell's encoder through a shared [`Builder`], so every DAPT and
/// SEPT artifact is trained once, then runs few-shot fine-tuning with the cell seed.
pub struct SetFitRunner<T> {
    pub builder: Builder<T>,
    pub tasks: BTreeMap<String, TaskData>,
    pub pairs: PairStream,
    pub setfit: SetFitConfig,
    pub shots: usize,
    pub self_training: Option<SelfTrainingConfig>,
    data_hashes: BTreeMap<String, String>,
    pairs_hash: String,
}

impl<T: Scalar> SetFitRunner<T> {
    pub fn new(builder: Builder<T>, tasks: BTreeMap<String, TaskData>, pairs: PairStream, setfit: SetFitConfig, shots: usize) -> Result<Self> {
        let data_hashes = tasks
            .iter()
            .map(|(k, t)| Ok((k.clone(), config_hash(&(&t.dataset, &t.unlabeled))?)))
            .collect::<Result<_>>()?;
        let pairs_hash = config_hash(&pairs)?;
        Ok(Self { builder, tasks, pairs, setfit, shots, self_training: None, data_hashes, pairs_hash })
    }

    fn task(&self, name: &str) -> Result<&TaskData> {
        self.tasks.get(name).ok_or_else(|| Error::Config(format!("unknown dataset `{name}`")))
    }

    /// Training time of every artifact the strategy's encoder descends from.
    fn lineage_seconds(&self, strategy: StrategyId, dataset: &str) -> StageSeconds {
        let mut keys: BTreeSet<ArtifactKey> = BTreeSet::new();
        for mut k in strategy.artifacts(dataset) {
            loop {
                keys.insert(k.clone());
                match k.parent() {
                    Some(p) => k = p,
                    None => break,
                }
            }
        }
        let mut s = StageSeconds::default();
        for r in self.builder.ledger.iter().filter(|r| keys.contains(&r.artifact)) {
            match r.stage {
                StageTag::Dapt => s.dapt += r.seconds,
                StageTag::Sept => s.sept += r.seconds,
                _ => {}
            }
        }
        s
    }
}

impl<T: Scalar> CellRunner for SetFitRunner<T> {
    fn config_hash(&self, cell: &Cell) -> Result<String> {
        let b = &self.builder;
        let base = b.registry.encoder(&ArtifactKey::Base).map(|e| e.config_hash()).transpose()?;
        let data = self.data_hashes.get(&cell.dataset).ok_or_else(|| Error::Config(format!("unknown dataset `{}`", cell.dataset)))?;
        config_hash(&serde_json::json!({
            "cell": cell,
            "base": base,
            "dapt": b.dapt, "dapt_peft": b.dapt_peft, "sept": b.sept, "sept_peft": b.sept_peft,
            "setfit": self.setfit, "shots": self.shots, "self_training": self.self_training,
            "data": data, "pairs": self.pairs_hash,
        }))
    }

    fn run(&mut self, cell: &Cell) -> Result<CellOutput> {
        let task = self.task(&cell.dataset)?.clone();
        let enc = self.builder.build(cell.strategy, &cell.dataset, &task.unlabeled, &self.pairs)?;
        let mut stage_seconds = self.lineage_seconds(cell.strategy, &cell.dataset);
        let start = Instant::now();
        let fs = sample_few_shot(&task.dataset, self.shots, cell.seed)?;
        let cfg = SetFitConfig { rng_seed: cell.seed, ..self.setfit.clone() };
        let (mut model, _) = run_setfit(&enc, &fs, &cfg)?;
        if let Some(st) = &self.self_training {
            model.head = run_self_training(&model.head, &model.encoder, &fs, &task.unlabeled, st)?.head;
        }
        stage_seconds.setfit = start.elapsed().as_secs_f64();
        let accuracy = evaluate(&model, &task.dataset.test)?;
        Ok(CellOutput { accuracy, stage_seconds })
    }
}

#[cfg(test)]
mod tests;
