//! Closed-loop simulation engine, experiment runner and result files.

mod config;
mod eventlog;
mod replay;
mod report;
mod sim;
mod snapshot;

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    heterogeneous_layout, homogeneous_layout, EngineConfig, ExperimentConfig, PlannerChoice, Scenario, DEFAULT_HORIZON,
};
pub use eventlog::{read_jsonl, to_jsonl, write_jsonl, Event, EventKind, EventLog};
pub use replay::replay_metrics;
pub use report::emit_report;
pub use sim::{RunStats, SimState};
pub use snapshot::{AgvSnapshot, CorridorSnapshot, ShelfSnapshot, Snapshot};

use crate::orders::Order;
use crate::SimError;

/// Column order of the results file.
pub const RESULT_COLUMNS: [&str; 11] = [
    "env",
    "scheduler",
    "planner",
    "pattern",
    "seed",
    "sr",
    "ct_ms",
    "tp",
    "makespan",
    "failures",
    "collisions",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub generated: u32,
    pub completed: u32,
    /// Success rate in percent.
    pub sr: f64,
    /// Mean planning cost per planning call: milliseconds, or node
    /// expansions in deterministic mode.
    pub ct: f64,
    /// Completed orders per step.
    pub tp: f64,
    pub makespan: u32,
    pub failures: u32,
    pub collisions: u32,
}

impl Metrics {
    pub fn compute(
        generated: u32,
        completed: u32,
        makespan: u32,
        planning_cost: f64,
        planning_calls: u32,
        failures: u32,
        collisions: u32,
    ) -> Self {
        let sr = if generated == 0 {
            100.0
        } else {
            completed as f64 * 100.0 / generated as f64
        };
        let tp = if makespan == 0 {
            0.0
        } else {
            completed as f64 / makespan as f64
        };
        let ct = if planning_calls == 0 {
            0.0
        } else {
            planning_cost / planning_calls as f64
        };
        Self {
            generated,
            completed,
            sr,
            ct,
            tp,
            makespan,
            failures,
            collisions,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub metrics: Metrics,
    pub orders: Vec<Order>,
    pub events: Vec<Event>,
    pub stats: RunStats,
    pub steps: u32,
}

/// Run one seed to completion.
pub fn run(config: &EngineConfig, seed: u64) -> Result<RunResult, SimError> {
    run_shared(Arc::new(config.clone()), seed)
}

pub fn run_shared(config: Arc<EngineConfig>, seed: u64) -> Result<RunResult, SimError> {
    let mut sim = SimState::new(config, seed)?;
    while sim.step() {}
    log::debug!("seed {seed}: finished after {} steps", sim.clock);
    let metrics = sim.metrics();
    let SimState {
        orders,
        log,
        stats,
        clock,
        ..
    } = sim;
    Ok(RunResult {
        seed,
        metrics,
        orders,
        events: log.into_events(),
        stats,
        steps: clock,
    })
}

/// Run `repeats` seeds starting at `base_seed`. Results come back in seed
/// order whether or not they ran in parallel.
pub fn run_experiment(exp: &ExperimentConfig) -> Result<Vec<RunResult>, SimError> {
    exp.engine.validate()?;
    let config = Arc::new(exp.engine.clone());
    let seeds: Vec<u64> = (0..exp.repeats as u64).map(|i| exp.base_seed + i).collect();
    if exp.parallel {
        seeds.par_iter().map(|s| run_shared(config.clone(), *s)).collect()
    } else {
        seeds.iter().map(|s| run_shared(config.clone(), *s)).collect()
    }
}

/// Mean and sample standard deviation over repeats.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub sr_mean: f64,
    pub sr_std: f64,
    pub ct_mean: f64,
    pub ct_std: f64,
    pub tp_mean: f64,
    pub tp_std: f64,
    pub makespan_mean: f64,
    pub failures_mean: f64,
    pub collisions_mean: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Aggregate {
    pub fn from_metrics<'a>(metrics: impl IntoIterator<Item = &'a Metrics>) -> Self {
        let ms: Vec<&Metrics> = metrics.into_iter().collect();
        let col = |f: fn(&Metrics) -> f64| ms.iter().map(|m| f(m)).collect::<Vec<f64>>();
        let (sr_mean, sr_std) = mean_std(&col(|m| m.sr));
        let (ct_mean, ct_std) = mean_std(&col(|m| m.ct));
        let (tp_mean, tp_std) = mean_std(&col(|m| m.tp));
        Self {
            runs: ms.len(),
            sr_mean,
            sr_std,
            ct_mean,
            ct_std,
            tp_mean,
            tp_std,
            makespan_mean: mean_std(&col(|m| m.makespan as f64)).0,
            failures_mean: mean_std(&col(|m| m.failures as f64)).0,
            collisions_mean: mean_std(&col(|m| m.collisions as f64)).0,
        }
    }

    pub fn from_results(results: &[RunResult]) -> Self {
        Self::from_metrics(results.iter().map(|r| &r.metrics))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub env: String,
    pub scheduler: String,
    pub planner: String,
    pub pattern: String,
    pub seed: u64,
    pub sr: f64,
    pub ct_ms: f64,
    pub tp: f64,
    pub makespan: u32,
    pub failures: u32,
    pub collisions: u32,
}

impl ResultRow {
    pub fn new(config: &EngineConfig, seed: u64, m: &Metrics) -> Self {
        Self {
            env: config.env_label.clone(),
            scheduler: config.scheduler.as_str().to_string(),
            planner: config.planner.label(),
            pattern: config.pattern.label().to_string(),
            seed,
            sr: m.sr,
            ct_ms: m.ct,
            tp: m.tp,
            makespan: m.makespan,
            failures: m.failures,
            collisions: m.collisions,
        }
    }
}

/// Append result rows; the header is written when `header` is set.
pub fn write_results_csv<W: Write>(out: W, rows: &[ResultRow], header: bool) -> Result<(), SimError> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    if rows.is_empty() && header {
        w.write_record(RESULT_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    order_id: u32,
    sku: u32,
    station: u32,
    release_step: u32,
    completed_step: Option<u32>,
    status: &'static str,
}

/// Per-order trace: `order_id,sku,station,release_step,completed_step,status`.
pub fn write_order_trace<W: Write>(out: W, orders: &[Order]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    for o in orders {
        w.serialize(TraceRow {
            order_id: o.id.0,
            sku: o.sku.0,
            station: o.station.0,
            release_step: o.release_step,
            completed_step: o.completed_step,
            status: o.status.as_str(),
        })?;
    }
    if orders.is_empty() {
        w.write_record(["order_id", "sku", "station", "release_step", "completed_step", "status"])?;
    }
    w.flush()?;
    Ok(())
}
