use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::encoder::StageTag;
use crate::error::Result;
use crate::pipelines::StrategyId;

/// Stages a strategy trains once for all tasks rather than once per task.
pub fn shared_stages(strategy: StrategyId) -> &'static [StageTag] {
    match strategy {
        StrategyId::Sept | StrategyId::Adasent | StrategyId::SeptThenDapt | StrategyId::SeptThenDaptAda => &[StageTag::Sept],
        _ => &[],
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostPlan {
    /// DAPT step count, reported alongside the costs.
    pub dapt_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub strategy: StrategyId,
    pub dapt_steps: usize,
    pub tasks: usize,
    pub sept_runs: usize,
    pub dapt_runs: usize,
    pub sept_h: f64,
    pub dapt_h: f64,
    pub setfit_h: f64,
    pub total_h: f64,
    /// Mean accuracy over all the strategy's records.
    pub acc: f64,
}

/// Training cost per strategy over all tasks in `records`. Stage times come
/// from each task's records (averaged over seeds); a shared stage is counted
/// once, a per-task stage once per task.
pub fn cost_report(records: &[RunRecord], plan: &CostPlan) -> Vec<CostRow> {
    let mut by_strategy: BTreeMap<StrategyId, BTreeMap<&str, Vec<&RunRecord>>> = BTreeMap::new();
    for r in records {
        by_strategy.entry(r.strategy).or_default().entry(r.dataset.as_str()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (strategy, tasks) in by_strategy {
        let shared = shared_stages(strategy);
        let mean = |rs: &[&RunRecord], f: fn(&RunRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
        let per_task: Vec<[f64; 3]> = tasks
            .values()
            .map(|rs| [mean(rs, |r| r.stage_seconds.sept), mean(rs, |r| r.stage_seconds.dapt), mean(rs, |r| r.stage_seconds.setfit)])
            .collect();
        let t = per_task.len();
        let fold = |i: usize, stage: StageTag| -> (f64, usize) {
            let uses = strategy.stages().contains(&stage);
            if !uses {
                return (0.0, 0);
            }
            if shared.contains(&stage) {
                let once = per_task.iter().map(|v| v[i]).fold(0.0, f64::max);
                (once, 1)
            } else {
                (per_task.iter().map(|v| v[i]).sum(), t)
            }
        };
        let (sept_s, sept_runs) = fold(0, StageTag::Sept);
        let (dapt_s, dapt_runs) = fold(1, StageTag::Dapt);
        let setfit_s: f64 = per_task.iter().map(|v| v[2]).sum();
        let all: Vec<&RunRecord> = tasks.values().flatten().copied().collect();
        let h = |s: f64| s / 3600.0;
        rows.push(CostRow {
            strategy,
            dapt_steps: plan.dapt_steps,
            tasks: t,
            sept_runs,
            dapt_runs,
            sept_h: h(sept_s),
            dapt_h: h(dapt_s),
            setfit_h: h(setfit_s),
            total_h: h(sept_s + dapt_s + setfit_s),
            acc: all.iter().map(|r| r.accuracy).sum::<f64>() / all.len() as f64,
        });
    }
    rows
}

/// Columns: strategy, dapt_steps, sept_h, dapt_h, total_h, acc.
pub fn write_cost_csv(rows: &[CostRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "dapt_steps", "sept_h", "dapt_h", "total_h", "acc"])?;
    for r in rows {
        w.write_record([
            r.strategy.as_str().to_string(),
            r.dapt_steps.to_string(),
            format!("{:.4}", r.sept_h),
            format!("{:.4}", r.dapt_h),
            format!("{:.4}", r.total_h),
            format!("{:.4}", r.acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}
