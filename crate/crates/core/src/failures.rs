//! Random and on-demand AGV failures, recovery, and safety corridors.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{Cell, Heading, Pose, Rect};
use crate::world::{AgvId, Layout};
use crate::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureConfig {
    pub per_step_probability: f64,
    pub down_steps: u32,
    pub enabled: bool,
}

impl FailureConfig {
    pub const fn disabled() -> Self {
        Self {
            per_step_probability: 0.0,
            down_steps: 40,
            enabled: false,
        }
    }

    /// 1% per step, 40 steps down.
    pub const fn standard() -> Self {
        Self {
            per_step_probability: 0.01,
            down_steps: 40,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.per_step_probability) {
            return Err(SimError::Config(format!(
                "failure probability {} outside [0, 1]",
                self.per_step_probability
            )));
        }
        if self.down_steps < 1 {
            return Err(SimError::Config("down steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureSource {
    Random,
    Injected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub id: u32,
    pub agv: AgvId,
    pub at: u32,
    pub recovery_at: u32,
    pub source: FailureSource,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyCorridor {
    pub id: u32,
    pub cells: BTreeSet<Cell>,
    pub active_from: u32,
    pub active_until: u32,
    /// Id of the causing failure event.
    pub cause: u32,
    pub cause_agv: AgvId,
    /// Agents that were already inside when the corridor appeared, with the
    /// corridor cells they occupied then. They may stay on those cells.
    pub exempt: Vec<(AgvId, Vec<Cell>)>,
    /// No boundary access strip could be built.
    pub degenerate: bool,
}

impl SafetyCorridor {
    pub fn is_active(&self, t: u32) -> bool {
        self.active_from <= t && t < self.active_until
    }

    pub fn exempt_cells(&self, agv: AgvId) -> &[Cell] {
        self.exempt
            .iter()
            .find(|(a, _)| *a == agv)
            .map(|(_, c)| c.as_slice())
            .unwrap_or(&[])
    }

    /// Cells of `rect` inside the corridor that `agv` is not allowed on.
    pub fn intrusion(&self, agv: AgvId, rect: &Rect) -> Option<Cell> {
        if agv == self.cause_agv {
            return None;
        }
        let ex = self.exempt_cells(agv);
        rect.cells().find(|c| self.cells.contains(c) && !ex.contains(c))
    }
}

/// Independent Bernoulli draw per active AGV, in the given order.
pub fn sample_failures<R: Rng>(
    config: &FailureConfig,
    active_agvs: &[AgvId],
    rng: &mut R,
    now: u32,
    first_id: u32,
) -> Vec<FailureEvent> {
    if !config.enabled {
        return Vec::new();
    }
    let mut out = Vec::new();
    for agv in active_agvs {
        if rng.random_bool(config.per_step_probability) {
            out.push(FailureEvent {
                id: first_id + out.len() as u32,
                agv: *agv,
                at: now,
                recovery_at: now + config.down_steps,
                source: FailureSource::Random,
            });
        }
    }
    out
}

/// On-demand failure. The caller checks the AGV is active.
pub fn inject_failure(
    agv: AgvId,
    is_active: bool,
    now: u32,
    config: &FailureConfig,
    id: u32,
) -> Result<FailureEvent, SimError> {
    if !is_active {
        return Err(SimError::NotActive(agv));
    }
    Ok(FailureEvent {
        id,
        agv,
        at: now,
        recovery_at: now + config.down_steps.max(1),
        source: FailureSource::Injected,
    })
}

/// Failed footprint, its one-cell ring (without shelves, obstacles and
/// stations) and the shortest strip from that ring to the map boundary.
pub fn build_corridor(
    event: &FailureEvent,
    failed_pose: Pose,
    footprint: u8,
    layout: &Layout,
    id: u32,
) -> SafetyCorridor {
    let (w, h) = (layout.width, layout.height);
    let body = Rect::footprint(failed_pose.cell, footprint);
    let shelf_cells: BTreeSet<Cell> = layout
        .shelves
        .iter()
        .flat_map(|s| s.rect().cells().collect::<Vec<_>>())
        .collect();
    let station_cells: BTreeSet<Cell> = layout.stations.iter().map(|s| s.cell).collect();
    let open = |c: &Cell| !shelf_cells.contains(c) && !layout.obstacles.contains(c) && !station_cells.contains(c);

    let mut cells: BTreeSet<Cell> = body.cells().collect();
    let ring = body.dilate(1).clip(w, h);
    cells.extend(ring.cells().filter(|c| open(c)));

    // Multi-source BFS; sources in row-major order, neighbours N, E, S, W.
    let on_boundary = |c: &Cell| c.x == 0 || c.y == 0 || c.x == w - 1 || c.y == h - 1;
    let idx = |c: Cell| (c.y * w + c.x) as usize;
    let mut sources: Vec<Cell> = cells.iter().copied().collect();
    sources.sort_by_key(|c| (c.y, c.x));
    let mut parent: Vec<Option<Cell>> = vec![None; (w * h) as usize];
    let mut seen = vec![false; (w * h) as usize];
    let mut queue = VecDeque::new();
    for s in &sources {
        seen[idx(*s)] = true;
        queue.push_back(*s);
    }
    let mut exit = None;
    while let Some(c) = queue.pop_front() {
        if on_boundary(&c) {
            exit = Some(c);
            break;
        }
        for d in Heading::ALL {
            let n = c.step(d);
            if layout.in_bounds(n) && !seen[idx(n)] && open(&n) {
                seen[idx(n)] = true;
                parent[idx(n)] = Some(c);
                queue.push_back(n);
            }
        }
    }
    let degenerate = exit.is_none();
    let mut c = exit;
    while let Some(cell) = c {
        if !cells.insert(cell) {
            break;
        }
        c = parent[idx(cell)];
    }

    SafetyCorridor {
        id,
        cells,
        active_from: event.at,
        active_until: event.recovery_at,
        cause: event.id,
        cause_agv: event.agv,
        exempt: Vec::new(),
        degenerate,
    }
}

/// Remove every event due at `now` and its corridor.
pub fn apply_recovery(
    events: &mut Vec<FailureEvent>,
    corridors: &mut Vec<SafetyCorridor>,
    now: u32,
) -> (Vec<AgvId>, Vec<u32>) {
    let mut agvs = Vec::new();
    let mut ended = Vec::new();
    events.retain(|e| {
        if e.recovery_at <= now {
            agvs.push(e.agv);
            corridors.retain(|c| {
                if c.cause == e.id {
                    ended.push(c.id);
                    false
                } else {
                    true
                }
            });
            false
        } else {
            true
        }
    });
    (agvs, ended)
}
