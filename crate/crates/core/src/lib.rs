//! Discrete-time simulator for robotic mobile fulfillment: AGVs fetch shelf
//! pods to picking stations under a coupled scheduler and multi-agent path
//! planner, with heterogeneous footprints, continuous-time execution checks
//! and failure injection.

pub mod engine;
pub mod executor;
pub mod failures;
pub mod geom;
pub mod orders;
pub mod planner;
pub mod scheduler;
pub mod world;

use thiserror::Error;

pub use engine::{
    emit_report, replay_metrics, run, run_experiment, Aggregate, EngineConfig, Event, EventKind, ExperimentConfig,
    Metrics, PlannerChoice, RunResult, Scenario, SimState, Snapshot,
};
pub use executor::{check_continuous_collisions, realize_plan, SafetyMargin, Trajectory, TriggerReason};
pub use failures::{FailureConfig, FailureEvent, FailureSource, SafetyCorridor};
pub use geom::{footprint_cells, Cell, Heading, Pose, Rect};
pub use orders::{Order, OrderId, OrderPattern, OrderStatus, Sku, SkuId, Task, TaskId, TaskStage};
pub use planner::{Action, TimedPath};
pub use scheduler::{Assignment, SchedulerPolicy};
pub use world::{generate_layout, load_layout, serialize_layout, AgvId, AgvSpec, Layout, ShelfId, StationId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("layout parse error: {0}")]
    Parse(String),
    #[error("invalid layout: {rule} ({entity}{})", .cell.map(|c| format!(" at {c}")).unwrap_or_default())]
    Invalid {
        rule: String,
        entity: String,
        cell: Option<Cell>,
    },
    #[error("infeasible layout: {0}")]
    Infeasible(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("agv {0} is not active")]
    NotActive(AgvId),
    #[error("unknown agv {0}")]
    UnknownAgv(AgvId),
    #[error("empty catalog: {0}")]
    EmptyCatalog(String),
    #[error("sku {0} is out of stock")]
    OutOfStock(SkuId),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema mismatch: missing column `{0}`")]
    Schema(String),
}
