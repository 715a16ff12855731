//! Serializable view of the simulation for the telemetry stream.

use serde::{Deserialize, Serialize};

use super::{Metrics, SimState};
use crate::geom::Heading;
use crate::orders::TaskStage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgvSnapshot {
    pub id: u32,
    /// Anchor position, interpolated while a slow move or turn is running.
    pub x: f64,
    pub y: f64,
    /// Heading in degrees, 0 = north, clockwise.
    pub heading: f64,
    pub footprint: u8,
    /// `active` or `failed`.
    pub health: String,
    pub carrying: Option<u32>,
    pub stage: Option<String>,
    pub recovery_at: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShelfSnapshot {
    pub id: u32,
    pub x: i32,
    pub y: i32,
    pub size: u8,
    pub carried_by: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorSnapshot {
    pub id: u32,
    pub cells: Vec<[i32; 2]>,
    pub active_until: u32,
    pub cause_agv: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u32,
    pub agvs: Vec<AgvSnapshot>,
    pub shelves: Vec<ShelfSnapshot>,
    pub corridors: Vec<CorridorSnapshot>,
    pub metrics: Metrics,
    /// Orders pending, assigned, completed, expired.
    pub orders: [usize; 4],
    pub finished: bool,
}

fn degrees(h: Heading) -> f64 {
    h.quarter_turns() * 90.0
}

impl SimState {
    pub fn snapshot(&self) -> Snapshot {
        let now = self.clock;
        let agvs = self
            .agvs
            .iter()
            .map(|a| {
                let (mut x, mut y, mut heading) = (a.pose.cell.x as f64, a.pose.cell.y as f64, degrees(a.pose.heading));
                if let Some(f) = &a.in_flight {
                    let span = (f.ends - f.started).max(1) as f64;
                    let k = ((now.saturating_sub(f.started)) as f64 / span).clamp(0.0, 1.0);
                    x = f.from.cell.x as f64 + k * (f.to.cell.x - f.from.cell.x) as f64;
                    y = f.from.cell.y as f64 + k * (f.to.cell.y - f.from.cell.y) as f64;
                    let (h0, h1) = (degrees(f.from.heading), degrees(f.to.heading));
                    let mut d = h1 - h0;
                    if d > 180.0 {
                        d -= 360.0;
                    } else if d < -180.0 {
                        d += 360.0;
                    }
                    heading = (h0 + k * d).rem_euclid(360.0);
                }
                let task = a.task.map(|t| &self.tasks[t.0 as usize]);
                AgvSnapshot {
                    id: a.id().0,
                    x,
                    y,
                    heading,
                    footprint: a.spec.footprint,
                    health: if a.is_active() {
                        "active".into()
                    } else {
                        "failed".into()
                    },
                    carrying: a.carrying.map(|s| s.0),
                    stage: task
                        .filter(|t| t.stage != TaskStage::Done)
                        .map(|t| t.stage.as_str().to_string()),
                    recovery_at: match a.health {
                        crate::world::Health::Failed { recovery_at } => Some(recovery_at),
                        _ => None,
                    },
                }
            })
            .collect();
        let shelves = self
            .layout()
            .shelves
            .iter()
            .map(|s| {
                let carrier = self.agvs.iter().find(|a| a.carrying == Some(s.id));
                let (x, y) = match carrier {
                    Some(a) => (a.pose.cell.x, a.pose.cell.y),
                    None => (s.home.x, s.home.y),
                };
                ShelfSnapshot {
                    id: s.id.0,
                    x,
                    y,
                    size: s.size,
                    carried_by: carrier.map(|a| a.id().0),
                }
            })
            .collect();
        let corridors = self
            .corridors
            .iter()
            .map(|c| CorridorSnapshot {
                id: c.id,
                cells: c.cells.iter().map(|c| [c.x, c.y]).collect(),
                active_until: c.active_until,
                cause_agv: c.cause_agv.0,
            })
            .collect();
        Snapshot {
            step: now,
            agvs,
            shelves,
            corridors,
            metrics: self.metrics(),
            orders: self.status_counts(),
            finished: self.is_finished(),
        }
    }
}
