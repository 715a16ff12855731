//! Recompute run metrics from a recorded event log.

use super::eventlog::{Event, EventKind};
use super::Metrics;
use crate::SimError;

fn field_u32(e: &Event, key: &str) -> Result<u32, SimError> {
    e.payload
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as u32)
        .ok_or_else(|| SimError::Schema(format!("{}.{key}", serde_json::to_string(&e.kind).unwrap_or_default())))
}

/// Metrics derived only from the events; a complete log reproduces the
/// `run_end` payload exactly.
pub fn replay_metrics(events: &[Event]) -> Result<Metrics, SimError> {
    let start = events
        .iter()
        .find(|e| e.kind == EventKind::RunStart)
        .ok_or_else(|| SimError::Schema("run_start".into()))?;
    let generated = field_u32(start, "orders")?;
    let horizon = field_u32(start, "horizon")?;
    let mut completed = 0u32;
    let mut last = 0u32;
    let mut cost = 0.0;
    let mut calls = 0u32;
    let mut failures = 0u32;
    let mut collisions = 0u32;
    for e in events {
        match e.kind {
            EventKind::Completion => {
                completed += 1;
                last = last.max(e.step);
            }
            EventKind::Planning => {
                if let Some(c) = e.payload.get("cost").and_then(|v| v.as_f64()) {
                    cost += c;
                    calls += 1;
                }
            }
            EventKind::Failure => failures += 1,
            EventKind::Collision => collisions += 1,
            _ => {}
        }
    }
    let makespan = if generated == 0 {
        0
    } else if completed == generated {
        last
    } else {
        horizon
    };
    Ok(Metrics::compute(
        generated, completed, makespan, cost, calls, failures, collisions,
    ))
}
