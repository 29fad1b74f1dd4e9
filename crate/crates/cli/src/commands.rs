use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use sentadapt::adapters::AdapterWeights;
use sentadapt::data::{export_dataset, export_pairs, sample_few_shot, synth_corpus, Format, PairStream};
use sentadapt::encoder::{ArchitectureConfig, Scope, StageTag, Tokenizer};
use sentadapt::evalharness::{
    cost_report, evaluate, run_matrix, write_cost_csv, CostPlan, MatrixSpec, ResultTable, SetFitRunner,
};
use sentadapt::head::LogisticHead;
use sentadapt::pipelines::{
    compose, run_dapt, run_self_training, run_sept, run_setfit, Artifact, ArtifactKey, ArtifactRegistry, Builder, Objective,
    SeptOutput, SetFitModel, StageConfig, StrategyId,
};

use crate::config::RunConfig;
use crate::store::{load_encoder, load_task, pairs, read_json, save_encoder, write_json, Enc, Store, UNLABELED};
use crate::{Common, Failure};

const HEAD: &str = "head.json";
const METRICS: &str = "metrics.json";
const TRAIN_LOG: &str = "train_log.json";

pub fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = &common.store {
        cfg.store = Some(s.clone());
    }
    if let Some(r) = &common.results {
        cfg.results = Some(r.clone());
    }
    if let Some(d) = &common.data {
        cfg.data.root = Some(d.clone());
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    // record where the environment pointed the store
    cfg.store = Some(cfg.store_root());
    Ok(cfg)
}

/// Flags shared by the two pre-training stages.
#[derive(Args, Debug, Clone)]
pub struct StageFlags {
    /// Start from this checkpoint instead of the stored base encoder.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Train only a fresh adapter of this kind (parallel, bottleneck, lora, prefix).
    #[arg(long)]
    peft: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, conflicts_with = "steps")]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the store location for the artifact).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl StageFlags {
    fn apply(&self, stage: &mut StageConfig, cfg: &RunConfig) -> Result<(), Failure> {
        if let Some(s) = self.steps {
            *stage = stage.clone().with_steps(s);
        }
        if let Some(e) = self.epochs {
            *stage = stage.clone().with_epochs(e);
        }
        if let Some(b) = self.batch_size {
            stage.batch_size = b;
        }
        if self.lr.is_some() {
            stage.learning_rate = self.lr;
        }
        if let Some(s) = self.seed {
            stage.rng_seed = s;
        }
        if self.peft.is_some() {
            stage.peft = cfg.peft(self.peft.as_deref())?;
        }
        stage.validate()?;
        Ok(())
    }

    fn start(&self, store: &Store, cfg: &RunConfig) -> Result<Enc, Failure> {
        match &self.from {
            Some(p) => load_encoder(p),
            None => store.base(cfg),
        }
    }
}

#[derive(Args, Debug)]
pub struct DaptArgs {
    #[arg(long)]
    dataset: String,
    /// mlm, tsdae or simcse.
    #[arg(long)]
    objective: Option<String>,
    #[command(flatten)]
    stage: StageFlags,
}

pub fn dapt(mut cfg: RunConfig, a: DaptArgs) -> Result<(), Failure> {
    if let Some(o) = &a.objective {
        cfg.dapt.objective = Objective::parse(o)?;
    }
    let mut stage = cfg.dapt.clone();
    a.stage.apply(&mut stage, &cfg)?;
    cfg.dapt = stage;
    let store = Store::new(&cfg);
    let start = a.stage.start(&store, &cfg)?;
    let task = load_task(&cfg, &a.dataset)?;
    let (enc, log) = run_dapt(&start, &task.unlabeled, &cfg.dapt)?;
    let out = a.stage.out.clone().unwrap_or_else(|| {
        let key = match &cfg.dapt.peft {
            None => a.dataset.clone(),
            Some(p) => format!("{}-{}", a.dataset, serde_json::to_value(p.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
        };
        store.root.join("dapt").join(key)
    });
    save_encoder(&enc, &out, &cfg)?;
    write_json(&out.join(TRAIN_LOG), &log)?;
    log::info!("dapt: {} steps in {:.1}s", log.steps, log.seconds);
    println!("{}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SeptArgs {
    /// Artifact name: `store/<name>` or, with --peft, `store/adapters/<name>`.
    #[arg(long, default_value = "sept")]
    name: String,
    #[command(flatten)]
    stage: StageFlags,
}

pub fn sept(mut cfg: RunConfig, a: SeptArgs) -> Result<(), Failure> {
    let mut stage = cfg.sept.clone();
    a.stage.apply(&mut stage, &cfg)?;
    cfg.sept = stage;
    let store = Store::new(&cfg);
    let start = a.stage.start(&store, &cfg)?;
    let stream = pairs(&cfg)?;
    let (trained, log) = run_sept(&start, &stream, &cfg.sept)?;
    let out = match trained {
        SeptOutput::Encoder(enc) => {
            let out = a.stage.out.clone().unwrap_or_else(|| store.root.join(&a.name));
            save_encoder(&enc, &out, &cfg)?;
            out
        }
        SeptOutput::Adapter(ad) => {
            let out = a.stage.out.clone().unwrap_or_else(|| store.root.join("adapters").join(&a.name));
            ad.save(&out)?;
            cfg.write_to(&out)?;
            out
        }
    };
    write_json(&out.join(TRAIN_LOG), &log)?;
    log::info!("sept: {} steps in {:.1}s", log.steps, log.seconds);
    println!("{}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct AssembleArgs {
    #[arg(long)]
    strategy: String,
    /// Dataset whose artifacts to use; defaults to the --dapt directory name.
    #[arg(long)]
    dataset: Option<String>,
    /// Backbone checkpoint to use instead of the stored one.
    #[arg(long, alias = "backbone")]
    dapt: Option<PathBuf>,
    /// Adapter directory to use instead of the stored one.
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dir_name(p: &Path) -> Option<String> {
    p.file_name().and_then(|s| s.to_str()).map(String::from)
}

pub fn assemble(cfg: RunConfig, a: AssembleArgs) -> Result<(), Failure> {
    let strategy = StrategyId::parse(&a.strategy)?;
    let dataset = a
        .dataset
        .clone()
        .or_else(|| a.dapt.as_deref().and_then(dir_name))
        .ok_or_else(|| Failure::Usage("assemble needs --dataset or --dapt".into()))?;
    let store = Store::new(&cfg);
    let mut registry = ArtifactRegistry::new();
    for key in strategy.artifacts(&dataset) {
        let artifact = if key.is_adapter() {
            let dir = a.adapter.clone().unwrap_or_else(|| store.path(&key));
            if !dir.is_dir() {
                return Err(Failure::Validation(format!("no adapter for {key} at {}", dir.display())));
            }
            Artifact::Adapter(AdapterWeights::<f32>::load(&dir)?)
        } else if key == ArtifactKey::Base && a.dapt.is_none() {
            Artifact::Encoder(store.base(&cfg)?)
        } else {
            Artifact::Encoder(load_encoder(&a.dapt.clone().unwrap_or_else(|| store.path(&key)))?)
        };
        registry.insert(key, artifact);
    }
    let enc = compose(strategy, &dataset, &registry)?;
    let out = a.out.unwrap_or_else(|| store.composed(strategy.as_str(), &dataset));
    save_encoder(&enc, &out, &cfg)?;
    let stages: Vec<String> = enc.provenance.stages().iter().map(|s| format!("{s:?}").to_uppercase()).collect();
    log::info!("{strategy}: provenance [{}]", stages.join(", "));
    println!("{}", out.display());
    Ok(())
}

/// What `setfit` and `selftrain` record next to a trained model.
#[derive(Debug, Serialize, Deserialize)]
struct Metrics {
    dataset: String,
    seed: u64,
    shots: usize,
    accuracy: Option<f64>,
    steps: usize,
    seconds: f64,
    #[serde(default)]
    pseudo_labels: usize,
}

#[derive(Args, Debug)]
pub struct SetfitArgs {
    #[arg(long)]
    dataset: String,
    /// Use the composed encoder of this strategy.
    #[arg(long, conflicts_with = "model")]
    strategy: Option<String>,
    /// Encoder checkpoint to fine-tune.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Run seed for shot sampling, pair generation and fine-tuning.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// none, adapter, transformer or all.
    #[arg(long)]
    scope: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn strategy_encoder(store: &Store, cfg: &RunConfig, strategy: StrategyId, dataset: &str) -> Result<Enc, Failure> {
    let composed = store.composed(strategy.as_str(), dataset);
    if composed.join("manifest.json").is_file() {
        return load_encoder(&composed);
    }
    match strategy.artifacts(dataset).as_slice() {
        [ArtifactKey::Base] => store.base(cfg),
        [key] => load_encoder(&store.path(key)),
        _ => Err(Failure::Validation(format!("no composed {strategy} encoder for {dataset}; run `assemble` first"))),
    }
}

pub fn setfit(mut cfg: RunConfig, a: SetfitArgs) -> Result<(), Failure> {
    let store = Store::new(&cfg);
    let seed = a.seed.or(cfg.seeds.first().copied()).unwrap_or(0);
    if let Some(k) = a.shots {
        cfg.eval.shots = k;
    }
    if let Some(e) = a.epochs {
        cfg.setfit.epochs = e;
    }
    if a.lr.is_some() {
        cfg.setfit.learning_rate = a.lr;
    }
    if let Some(s) = &a.scope {
        cfg.setfit.scope = Some(Scope::parse(s)?);
    }
    cfg.setfit.rng_seed = seed;
    let (enc, label) = match (&a.model, &a.strategy) {
        (Some(m), _) => (load_encoder(m)?, dir_name(m).unwrap_or_else(|| "model".into())),
        (None, Some(s)) => {
            let s = StrategyId::parse(s)?;
            (strategy_encoder(&store, &cfg, s, &a.dataset)?, s.as_str().to_lowercase())
        }
        (None, None) => (store.base(&cfg)?, "base".into()),
    };
    let task = load_task(&cfg, &a.dataset)?;
    let fs = sample_few_shot(&task.dataset, cfg.eval.shots, seed)?;
    let (model, log) = run_setfit(&enc, &fs, &cfg.setfit)?;
    let accuracy = if task.dataset.test.is_empty() { None } else { Some(evaluate(&model, &task.dataset.test)?) };
    let out = a.out.unwrap_or_else(|| store.root.join("setfit").join(format!("{label}-{}-{seed}", a.dataset)));
    save_encoder(&model.encoder, &out.join("encoder"), &cfg)?;
    cfg.write_to(&out)?;
    write_json(&out.join(HEAD), &model.head)?;
    let metrics = Metrics { dataset: a.dataset, seed, shots: cfg.eval.shots, accuracy, steps: log.steps, seconds: log.seconds, pseudo_labels: 0 };
    write_json(&out.join(METRICS), &metrics)?;
    if let Some(acc) = accuracy {
        println!("accuracy {acc:.4}");
    }
    println!("{}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SelftrainArgs {
    /// Output directory of a `setfit` run.
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the dataset the model was trained on.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn selftrain(mut cfg: RunConfig, a: SelftrainArgs) -> Result<(), Failure> {
    if let Some(t) = a.threshold {
        cfg.selftrain.threshold = t;
    }
    if let Some(m) = a.max_iter {
        cfg.selftrain.max_iter = m;
    }
    let trained: Metrics = read_json(&a.model.join(METRICS))?;
    let head: LogisticHead = read_json(&a.model.join(HEAD))?;
    let encoder = load_encoder(&a.model.join("encoder"))?;
    let dataset = a.dataset.unwrap_or(trained.dataset);
    let task = load_task(&cfg, &dataset)?;
    let fs = sample_few_shot(&task.dataset, trained.shots, trained.seed)?;
    let start = std::time::Instant::now();
    let st = run_self_training(&head, &encoder, &fs, &task.unlabeled, &cfg.selftrain)?;
    let seconds = start.elapsed().as_secs_f64();
    let model = SetFitModel { encoder, head: st.head };
    let accuracy = if task.dataset.test.is_empty() { None } else { Some(evaluate(&model, &task.dataset.test)?) };
    let out = a.out.unwrap_or_else(|| {
        let mut name = a.model.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        name.push("-selftrain");
        a.model.with_file_name(name)
    });
    cfg.write_to(&out)?;
    write_json(&out.join(HEAD), &model.head)?;
    write_json(&out.join("pseudo_labels.json"), &st.pseudo)?;
    let metrics = Metrics {
        dataset,
        seed: trained.seed,
        shots: trained.shots,
        accuracy,
        steps: st.iterations,
        seconds,
        pseudo_labels: st.pseudo.len(),
    };
    write_json(&out.join(METRICS), &metrics)?;
    if let Some(acc) = accuracy {
        println!("accuracy {acc:.4}");
    }
    println!("{}", out.display());
    Ok(())
}

/// Contents of a `--matrix` file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    strategies: Vec<String>,
    datasets: Vec<String>,
    /// Defaults to the run config's seeds.
    seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Strategy x dataset x seed matrix (TOML); cells already in the results
    /// directory with the same config hash are skipped.
    #[arg(long, conflicts_with = "model")]
    matrix: Option<PathBuf>,
    /// Output directory of a `setfit` or `selftrain` run.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
}

pub fn eval(cfg: RunConfig, a: EvalArgs) -> Result<(), Failure> {
    match (&a.matrix, &a.model) {
        (Some(m), _) => eval_matrix(cfg, m),
        (None, Some(model)) => {
            let trained: Metrics = read_json(&model.join(METRICS))?;
            let head: LogisticHead = read_json(&model.join(HEAD))?;
            // self-training outputs share the encoder of the run they refit
            let enc_dir = if model.join("encoder").is_dir() {
                model.join("encoder")
            } else {
                let name = dir_name(model).unwrap_or_default();
                model.with_file_name(name.trim_end_matches("-selftrain")).join("encoder")
            };
            let m = SetFitModel { encoder: load_encoder(&enc_dir)?, head };
            let task = load_task(&cfg, a.dataset.as_deref().unwrap_or(&trained.dataset))?;
            println!("accuracy {:.4}", evaluate(&m, &task.dataset.test)?);
            Ok(())
        }
        (None, None) => Err(Failure::Usage("eval needs --matrix or --model".into())),
    }
}

fn eval_matrix(cfg: RunConfig, path: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    let file: MatrixFile = toml::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    let spec = MatrixSpec {
        strategies: file.strategies.iter().map(|s| StrategyId::parse(s)).collect::<Result<_, _>>()?,
        datasets: file.datasets,
        seeds: file.seeds.unwrap_or_else(|| cfg.seeds.clone()),
    };
    if spec.cells().is_empty() {
        return Err(Failure::Validation("the matrix has no cells".into()));
    }
    let store = Store::new(&cfg);
    let tasks = spec.datasets.iter().map(|d| Ok((d.clone(), load_task(&cfg, d)?))).collect::<Result<BTreeMap<_, _>, Failure>>()?;
    let needs_pairs = spec.strategies.iter().any(|s| s.stages().contains(&StageTag::Sept));
    let stream = if needs_pairs { pairs(&cfg)? } else { PairStream { source: "none".into(), pairs: Vec::new() } };
    let builder = Builder::new(store.base(&cfg)?, cfg.dapt.clone(), cfg.sept.clone(), cfg.adapter.clone());
    let mut runner = SetFitRunner::new(builder, tasks, stream, cfg.setfit.clone(), cfg.eval.shots)?;
    if cfg.eval.self_training {
        runner.self_training = Some(cfg.selftrain);
    }
    let results = cfg.results_root();
    let outcome = run_matrix(&spec, &mut runner, &results)?;

    for key in runner.builder.registry.keys().filter(|k| **k != ArtifactKey::Base) {
        let dir = store.path(key);
        match runner.builder.registry.get(key) {
            Some(Artifact::Encoder(e)) => save_encoder(e, &dir, &cfg)?,
            Some(Artifact::Adapter(ad)) => {
                ad.save(&dir)?;
                cfg.write_to(&dir)?;
            }
            None => {}
        }
    }
    if !runner.builder.ledger.is_empty() {
        write_json(&results.join("ledger.json"), &runner.builder.ledger)?;
    }
    cfg.write_to(&results)?;
    outcome.table.write_csv(&results.join("aggregate.csv"))?;
    if let Some(b) = &cfg.eval.baseline {
        let base = StrategyId::parse(b)?;
        let mut w = csv::Writer::from_path(results.join("significance.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
        let csv_err = |e: csv::Error| Failure::Runtime(e.to_string());
        w.write_record(["strategy", "baseline", "dataset", "p_value"]).map_err(csv_err)?;
        for s in spec.strategies.iter().filter(|s| **s != base) {
            for d in &spec.datasets {
                match outcome.table.compare(*s, base, d, cfg.eval.significance) {
                    Ok(p) => w.write_record([s.as_str(), base.as_str(), d, &p.to_string()]).map_err(csv_err)?,
                    Err(e) => log::warn!("{s} vs {base} on {d}: {e}"),
                }
            }
        }
        w.flush()?;
    }
    for c in outcome.table.cells() {
        println!("{}\t{}\t{:.4}\t{:.4}\t{}", c.strategy, c.dataset, c.mean, c.std, c.n_seeds);
    }
    println!("executed {} cached {} failed {}", outcome.executed, outcome.cached, outcome.failures.len());
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} cells failed; see the .error.json files under {}", outcome.failures.len(), results.display())))
    }
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Where to write aggregate.csv and cost.csv (default: the results directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dapt_steps: Option<usize>,
}

pub fn report(mut cfg: RunConfig, a: ReportArgs) -> Result<(), Failure> {
    if a.dapt_steps.is_some() {
        cfg.report.dapt_steps = a.dapt_steps;
    }
    let results = cfg.results_root();
    let table = ResultTable::load(&results)?;
    if table.rows.is_empty() {
        return Err(Failure::Validation(format!("no run records under {}", results.display())));
    }
    let out = a.out.unwrap_or(results);
    fs::create_dir_all(&out)?;
    table.write_csv(&out.join("aggregate.csv"))?;
    let plan = CostPlan { dapt_steps: cfg.report.dapt_steps.or(cfg.dapt.steps).unwrap_or(0) };
    let rows = cost_report(&table.rows, &plan);
    write_cost_csv(&rows, &out.join("cost.csv"))?;
    cfg.write_to(&out)?;
    println!("strategy\tsept_h\tdapt_h\ttotal_h\tacc");
    for r in &rows {
        println!("{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", r.strategy, r.sept_h, r.dapt_h, r.total_h, r.acc);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory (default: the data root).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of tasks; names get a numeric suffix when more than one.
    #[arg(long, default_value_t = 1)]
    tasks: usize,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<(), Failure> {
    if a.tasks == 0 {
        return Err(Failure::Validation("--tasks must be at least 1".into()));
    }
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    let out = a.out.unwrap_or_else(|| cfg.data_root());
    let tok = Tokenizer::new(ArchitectureConfig::profile(&cfg.base.profile)?.vocab_size)?;
    let mut streams = Vec::new();
    for t in 0..a.tasks {
        let mut spec = cfg.synth.clone();
        if a.tasks > 1 {
            spec.name = format!("{}{t}", spec.name);
            spec.seed = spec.seed.wrapping_add(t as u64);
        }
        let corpus = synth_corpus(&spec, &tok)?;
        let dir = out.join(&spec.name);
        export_dataset(&corpus.dataset, &dir, Format::Jsonl)?;
        if corpus.unlabeled.is_empty() {
            let _ = fs::remove_file(dir.join(UNLABELED));
        } else {
            fs::write(dir.join(UNLABELED), corpus.unlabeled.join("\n") + "\n")?;
        }
        streams.push(corpus.pairs);
        println!("{}", dir.display());
    }
    export_pairs(&PairStream::mix(&streams, cfg.synth.seed), &out.join("pairs.jsonl"))?;
    cfg.write_to(&out)?;
    Ok(())
}
