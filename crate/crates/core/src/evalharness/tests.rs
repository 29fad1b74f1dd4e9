use super::*;

struct Mock {
    calls: usize,
    salt: String,
    fail_seed: Option<u64>,
}

impl Mock {
    fn new() -> Self {
        Self { calls: 0, salt: "a".into(), fail_seed: None }
    }

    fn acc(cell: &Cell) -> f64 {
        0.5 + 0.01 * cell.seed as f64 + if cell.strategy == StrategyId::Adasent { 0.1 } else { 0.0 }
    }
}

impl CellRunner for Mock {
    fn config_hash(&self, cell: &Cell) -> Result<String> {
        config_hash(&(cell, &self.salt))
    }

    fn run(&mut self, cell: &Cell) -> Result<CellOutput> {
        self.calls += 1;
        if self.fail_seed == Some(cell.seed) {
            return Err(Error::Degenerate("boom".into()));
        }
        Ok(CellOutput { accuracy: Self::acc(cell), stage_seconds: StageSeconds { dapt: 1.0, sept: 2.0, setfit: 3.0 } })
    }
}

fn spec() -> MatrixSpec {
    MatrixSpec { strategies: vec![StrategyId::Base, StrategyId::Adasent], datasets: vec!["t".into()], seeds: (0..5).collect() }
}

fn rec(strategy: StrategyId, dataset: &str, seed: u64, accuracy: f64, s: StageSeconds) -> RunRecord {
    RunRecord { strategy, dataset: dataset.into(), seed, accuracy, stage_seconds: s, config_hash: String::new() }
}

#[test]
fn accuracy_counts_matches() {
    assert_eq!(accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
    assert_eq!(accuracy(&[0, 0, 0, 0], &[0, 1, 2, 1]).unwrap(), 0.25);
    assert!(accuracy(&[], &[]).is_err());
    assert!(accuracy(&[0], &[0, 1]).is_err());
}

#[test]
fn matrix_writes_one_record_per_cell_and_reruns_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Mock::new();
    let out = run_matrix(&spec(), &mut m, dir.path()).unwrap();
    assert_eq!((out.executed, out.cached, m.calls), (10, 0, 10));
    assert_eq!(out.table.rows.len(), 10);
    assert!(dir.path().join("ADASENT/t/3.json").is_file());

    let again = run_matrix(&spec(), &mut m, dir.path()).unwrap();
    assert_eq!((again.executed, again.cached, m.calls), (0, 10, 10));
    assert_eq!(again.table, out.table);
    assert_eq!(ResultTable::load(dir.path()).unwrap(), out.table);

    m.salt = "b".into();
    let changed = run_matrix(&spec(), &mut m, dir.path()).unwrap();
    assert_eq!(changed.executed, 10);
}

#[test]
fn failing_cell_is_recorded_and_the_rest_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Mock::new();
    m.fail_seed = Some(2);
    let out = run_matrix(&spec(), &mut m, dir.path()).unwrap();
    assert_eq!(out.failures.len(), 2);
    assert_eq!(out.table.rows.len(), 8);
    assert!(dir.path().join("BASE/t/2.error.json").is_file());

    m.fail_seed = None;
    let out = run_matrix(&spec(), &mut m, dir.path()).unwrap();
    assert_eq!((out.executed, out.cached), (2, 8));
    assert!(!dir.path().join("BASE/t/2.error.json").exists());
}

#[test]
fn mean_and_sample_std() {
    let z = StageSeconds::default();
    let t = ResultTable::new(vec![
        rec(StrategyId::Base, "t", 0, 0.5, z),
        rec(StrategyId::Base, "t", 1, 0.7, z),
        rec(StrategyId::Base, "t", 2, 0.6, z),
        rec(StrategyId::Sept, "t", 0, 0.4, z),
    ]);
    let c = t.cells();
    assert!((c[0].mean - 0.6).abs() < 1e-12);
    assert!((c[0].std - 0.1).abs() < 1e-12);
    assert_eq!(c[0].n_seeds, 3);
    assert_eq!((c[1].std, c[1].n_seeds), (0.0, 1));
    assert!(t.check_seed_sets().is_err());
}

#[test]
fn comparison_is_seed_matched() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_matrix(&spec(), &mut Mock::new(), dir.path()).unwrap();
    // the mock's gap is a constant 0.1, so the paired test sees no variance
    let p = out.table.compare(StrategyId::Adasent, StrategyId::Base, "t", SigTest::PairedT).unwrap();
    assert!(p < 1e-6, "{p}");
    let mut rows = out.table.rows.clone();
    rows.retain(|r| !(r.strategy == StrategyId::Base && r.seed == 4));
    assert!(ResultTable::new(rows).compare(StrategyId::Adasent, StrategyId::Base, "t", SigTest::PairedT).is_err());
}

#[test]
fn aggregate_csv_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_matrix(&spec(), &mut Mock::new(), dir.path()).unwrap();
    let path = dir.path().join("agg.csv");
    out.table.write_csv(&path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "strategy,dataset,mean,std,n_seeds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("BASE,t,0.52"));
}

/// Per-task and shared stage hours for `tasks` tasks, in the shape the
/// runner reports them.
fn cost_records(tasks: usize, sept_s: f64, dapt_s: f64, seeds: u64) -> Vec<RunRecord> {
    let mut out = Vec::new();
    for t in 0..tasks {
        for seed in 0..seeds {
            let ds = format!("task{t}");
            out.push(rec(StrategyId::DaptThenSept, &ds, seed, 0.7, StageSeconds { dapt: dapt_s, sept: sept_s, setfit: 0.0 }));
            out.push(rec(StrategyId::Adasent, &ds, seed, 0.7, StageSeconds { dapt: dapt_s, sept: sept_s * 0.17 / 0.27, setfit: 0.0 }));
        }
    }
    out
}

#[test]
fn shared_adapter_amortises_sept_across_tasks() {
    let h = 3600.0;
    let rows = cost_report(&cost_records(15, 0.27 * h, 0.44 / 15.0 * h, 3), &CostPlan { dapt_steps: 2344 });
    let get = |s| rows.iter().find(|r| r.strategy == s).unwrap();
    let dts = get(StrategyId::DaptThenSept);
    let ada = get(StrategyId::Adasent);
    assert!((dts.total_h - 4.49).abs() < 0.01, "{}", dts.total_h);
    assert!((ada.total_h - 0.61).abs() < 0.01, "{}", ada.total_h);
    assert_eq!((dts.sept_runs, dts.dapt_runs, ada.sept_runs, ada.dapt_runs), (15, 15, 1, 15));

    let one = cost_report(&cost_records(1, 0.27 * h, 0.44 / 15.0 * h, 1), &CostPlan::default());
    let get = |s| one.iter().find(|r| r.strategy == s).unwrap();
    assert!(get(StrategyId::Adasent).total_h < get(StrategyId::DaptThenSept).total_h);
    assert_eq!(get(StrategyId::Adasent).sept_runs, 1);
}

#[test]
fn zero_durations_cost_nothing() {
    let rows = cost_report(&cost_records(4, 0.0, 0.0, 2), &CostPlan::default());
    assert!(rows.iter().all(|r| r.total_h == 0.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cost.csv");
    write_cost_csv(&rows, &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap().lines().next().unwrap(), "strategy,dapt_steps,sept_h,dapt_h,total_h,acc");
}

#[test]
fn cost_ignores_stages_a_strategy_does_not_run() {
    let s = StageSeconds { dapt: 9.0, sept: 9.0, setfit: 0.0 };
    let rows = cost_report(&[rec(StrategyId::Base, "t", 0, 0.5, s)], &CostPlan::default());
    assert_eq!((rows[0].sept_h, rows[0].dapt_h), (0.0, 0.0));
}

mod real {
    use super::*;
    use crate::adapters::AdapterConfig;
    use crate::data::{synth_corpus, SynthSpec};
    use crate::encoder::{ArchitectureConfig, EncoderState, Pooling};
    use crate::pipelines::StageConfig;

    fn base() -> EncoderState<f32> {
        EncoderState::init(ArchitectureConfig::tiny(), Pooling::Mean, 5).unwrap()
    }

    fn corpus(seed: u64) -> crate::data::SynthCorpus {
        let spec = SynthSpec { train_per_class: 20, test_per_class: 30, pairs_per_class: 30, seed, ..SynthSpec::default() };
        synth_corpus(&spec, &base().tokenizer()).unwrap()
    }

    #[test]
    fn setfit_on_separable_synthetic_task() {
        let c = corpus(41);
        for seed in 0..3 {
            let fs = sample_few_shot(&c.dataset, 8, seed).unwrap();
            let cfg = SetFitConfig { learning_rate: Some(1e-3), epochs: 2, rng_seed: seed, ..SetFitConfig::default() };
            let (model, _) = run_setfit(&base(), &fs, &cfg).unwrap();
            let acc = evaluate(&model, &c.dataset.test).unwrap();
            assert!(acc >= 0.9, "seed {seed}: {acc}");
            assert!(evaluate(&model, &[]).is_err());
        }
    }

    #[test]
    fn runner_shares_the_adapter_and_attributes_stage_times() {
        let pairs = corpus(50).pairs;
        let tasks: BTreeMap<String, TaskData> =
            (0..2).map(|t| (format!("task{t}"), TaskData::from_dataset(corpus(60 + t).dataset))).collect();
        let dapt = StageConfig { batch_size: 8, learning_rate: Some(1e-3), ..StageConfig::dapt().with_steps(3) };
        let sept = StageConfig { batch_size: 8, learning_rate: Some(1e-3), ..StageConfig::sept() };
        let builder = Builder::new(base(), dapt, sept, AdapterConfig::parallel());
        let setfit = SetFitConfig { learning_rate: Some(1e-3), ..SetFitConfig::default() };
        let mut runner = SetFitRunner::new(builder, tasks, pairs, setfit, 4).unwrap();
        let spec = MatrixSpec {
            strategies: vec![StrategyId::Base, StrategyId::Adasent],
            datasets: vec!["task0".into(), "task1".into()],
            seeds: vec![0, 1],
        };
        let dir = tempfile::tempdir().unwrap();
        let out = run_matrix(&spec, &mut runner, dir.path()).unwrap();
        assert_eq!(out.table.rows.len(), 8);
        assert!(out.failures.is_empty());
        assert_eq!(runner.builder.runs(StageTag::Sept), 1);
        assert_eq!(runner.builder.runs(StageTag::Dapt), 2);
        for r in &out.table.rows {
            let s = r.stage_seconds;
            match r.strategy {
                StrategyId::Base => assert_eq!((s.sept, s.dapt), (0.0, 0.0)),
                _ => assert!(s.sept > 0.0 && s.dapt > 0.0),
            }
            assert!(s.setfit > 0.0);
        }
        // the shared adapter's time is the same for every ADASENT cell
        let sept: BTreeSet<u64> =
            out.table.rows.iter().filter(|r| r.strategy == StrategyId::Adasent).map(|r| r.stage_seconds.sept.to_bits()).collect();
        assert_eq!(sept.len(), 1);

        let again = run_matrix(&spec, &mut runner, dir.path()).unwrap();
        assert_eq!((again.executed, again.cached), (0, 8));
        let mut other_k = SetFitRunner { shots: 5, ..runner };
        let c = Cell { strategy: StrategyId::Base, dataset: "task0".into(), seed: 0 };
        assert_ne!(other_k.config_hash(&c).unwrap(), again.table.rows[0].config_hash);
        assert!(other_k.run(&Cell { dataset: "nope".into(), ..c }).is_err());
    }
}
