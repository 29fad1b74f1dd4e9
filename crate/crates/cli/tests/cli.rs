use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

struct Env {
    dir: TempDir,
}

impl Env {
    /// A data root with two small synthetic tasks and a fast run config.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = format!(
            r#"seeds = [0, 1]

[data]
root = "{data}"

[dapt]
steps = 3
batch_size = 8
learning_rate = 0.001

[sept]
batch_size = 8
learning_rate = 0.001

[setfit]
learning_rate = 0.001

[eval]
shots = 4
baseline = "base"

[synth]
train_per_class = 10
test_per_class = 10
pairs_per_class = 8
"#,
            data = dir.path().join("data").display()
        );
        fs::write(dir.path().join("c.toml"), cfg).unwrap();
        let env = Self { dir };
        env.ok(&["synth", "--tasks", "2"]);
        env
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sentadapt"))
            .args(args)
            .arg("--config")
            .arg(self.path("c.toml"))
            .env("SENTADAPT_STORE", self.path("store"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_writes_datasets_and_pairs() {
    let e = Env::new();
    for t in ["synth0", "synth1"] {
        assert!(e.path(&format!("data/{t}/train.jsonl")).is_file());
        assert!(e.path(&format!("data/{t}/dataset.json")).is_file());
    }
    assert!(e.path("data/pairs.jsonl").is_file());
    assert!(e.path("data/resolved_config.toml").is_file());
}

#[test]
fn sept_peft_writes_an_adapter_directory() {
    let e = Env::new();
    let out = e.ok(&["sept", "--peft", "parallel"]);
    let dir = e.path("store/adapters/sept");
    assert_eq!(out.trim(), dir.display().to_string());
    let m = json(&dir.join("adapter.json"));
    assert_eq!(m["kind"], "parallel");
    assert_eq!(m["trained_stages"], serde_json::json!(["SEPT"]));
    assert!(dir.join("adapter.safetensors").is_file());
    assert!(dir.join("resolved_config.toml").is_file());
    assert!(dir.join("train_log.json").is_file());
    assert!(e.path("store/base/manifest.json").is_file());
}

#[test]
fn assemble_adasent_then_fine_tune() {
    let e = Env::new();
    e.ok(&["dapt", "--dataset", "synth0"]);
    e.ok(&["sept", "--peft", "parallel"]);
    let dapt = e.path("store/dapt/synth0");
    let adapter = e.path("store/adapters/sept");
    e.ok(&["assemble", "--strategy", "adasent", "--dapt", dapt.to_str().unwrap(), "--adapter", adapter.to_str().unwrap()]);
    let composed = e.path("store/composed/adasent-synth0");
    let m = json(&composed.join("manifest.json"));
    let stages: Vec<&str> = m["provenance"].as_array().unwrap().iter().map(|x| x["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["BASE", "DAPT", "SEPT"]);
    assert!(composed.join("resolved_config.toml").is_file());

    let out = e.ok(&["setfit", "--strategy", "adasent", "--dataset", "synth0", "--seed", "3"]);
    assert!(out.starts_with("accuracy "));
    let run = e.path("store/setfit/adasent-synth0-3");
    assert!(run.join("head.json").is_file());
    assert!(run.join("encoder/manifest.json").is_file());
    let metrics = json(&run.join("metrics.json"));
    assert_eq!(metrics["seed"], 3);

    e.ok(&["selftrain", "--model", run.to_str().unwrap(), "--threshold", "1.1"]);
    let st = e.path("store/setfit/adasent-synth0-3-selftrain");
    assert_eq!(json(&st.join("pseudo_labels.json")), serde_json::json!([]));
    assert_eq!(json(&st.join("head.json")), json(&run.join("head.json")));
    let a = e.ok(&["eval", "--model", run.to_str().unwrap()]);
    let b = e.ok(&["eval", "--model", st.to_str().unwrap()]);
    assert_eq!(a, b);
}

#[test]
fn matrix_rerun_is_fully_cached() {
    let e = Env::new();
    fs::write(e.path("m.toml"), "strategies = [\"base\", \"adasent\"]\ndatasets = [\"synth0\"]\n").unwrap();
    let first = e.ok(&["eval", "--matrix", e.path("m.toml").to_str().unwrap()]);
    assert!(first.contains("executed 4 cached 0 failed 0"), "{first}");
    for s in ["BASE", "ADASENT"] {
        for seed in [0, 1] {
            assert!(e.path(&format!("results/{s}/synth0/{seed}.json")).is_file());
        }
    }
    assert!(e.path("store/adapters/sept/adapter.json").is_file());
    assert!(e.path("store/dapt/synth0/manifest.json").is_file());
    let agg = fs::read_to_string(e.path("results/aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 3);
    assert!(e.path("results/significance.csv").is_file());

    let second = e.ok(&["eval", "--matrix", e.path("m.toml").to_str().unwrap()]);
    assert!(second.contains("executed 0 cached 4 failed 0"), "{second}");
    assert!(!e.path("results/ledger.json").exists() || json(&e.path("results/ledger.json")).as_array().unwrap().len() == 2);

    e.ok(&["report"]);
    let cost = fs::read_to_string(e.path("results/cost.csv")).unwrap();
    assert!(cost.starts_with("strategy,dapt_steps,sept_h,dapt_h,total_h,acc"));
    assert_eq!(cost.lines().count(), 3);
}

#[test]
fn exit_codes_are_categorised() {
    let e = Env::new();
    assert_eq!(e.code(&["frobnicate"]), 2);
    assert_eq!(e.code(&["eval"]), 2);
    fs::write(e.path("bad.toml"), "[dapt]\nstepz = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sentadapt"))
        .args(["sept", "--config"])
        .arg(e.path("bad.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(e.code(&["assemble", "--strategy", "adasent", "--dataset", "synth0"]), 3);
    assert_eq!(e.code(&["setfit", "--dataset", "nope"]), 3);
    // a results "directory" that is a file cannot be written
    fs::write(e.path("blocker"), "").unwrap();
    fs::write(e.path("m.toml"), "strategies = [\"base\"]\ndatasets = [\"synth0\"]\nseeds = [0]\n").unwrap();
    let out = e.run(&["eval", "--matrix", e.path("m.toml").to_str().unwrap(), "--results", e.path("blocker/results").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
