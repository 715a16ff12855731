//! Task-to-AGV assignment policies.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Rect;
use crate::orders::{Task, TaskId};
use crate::world::{AgvId, AgvSpec, AgvState, Layout, ShelfPod};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task: TaskId,
    pub agv: AgvId,
    pub decided_at: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerPolicy {
    /// Greedy: each task goes to the idle AGV with the shortest fetch-and-deliver distance.
    Ta,
    /// Uniformly random compatible idle AGV.
    Rd,
}

impl SchedulerPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerPolicy::Ta => "ta",
            SchedulerPolicy::Rd => "rd",
        }
    }
}

impl fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ta" => Ok(SchedulerPolicy::Ta),
            "rd" => Ok(SchedulerPolicy::Rd),
            other => Err(format!("unknown scheduler `{other}` (expected ta or rd)")),
        }
    }
}

/// Whether `spec` can carry `shelf`: big enough, and its own footprint fits
/// at the shelf home without covering obstacles or other shelves.
pub fn compatible(spec: &AgvSpec, shelf: &ShelfPod, layout: &Layout) -> bool {
    if !spec.can_carry(shelf.size) {
        return false;
    }
    let r = Rect::footprint(shelf.home, spec.footprint);
    r.within(layout.width, layout.height)
        && r.cells().all(|c| {
            !layout.obstacles.contains(&c) && layout.shelves.iter().all(|s| s.id == shelf.id || !s.rect().contains(c))
        })
}

/// Assign pending tasks (release order) to idle AGVs. Unassignable tasks are
/// left for later steps.
pub fn schedule_step<R: Rng>(
    policy: SchedulerPolicy,
    pending_tasks: &[&Task],
    idle_agvs: &[&AgvState],
    layout: &Layout,
    rng: &mut R,
    now: u32,
) -> Vec<Assignment> {
    let mut idle: Vec<&AgvState> = idle_agvs.to_vec();
    idle.sort_by_key(|a| a.id());
    let mut taken = vec![false; idle.len()];
    let mut out = Vec::new();
    for task in pending_tasks {
        if taken.iter().all(|t| *t) {
            break;
        }
        let shelf = layout.shelf(task.shelf).expect("task shelf exists");
        let station = layout.station(task.station).expect("task station exists");
        let cands: Vec<usize> = (0..idle.len())
            .filter(|&i| !taken[i] && compatible(&idle[i].spec, shelf, layout))
            .collect();
        if cands.is_empty() {
            continue;
        }
        let pick = match policy {
            SchedulerPolicy::Ta => *cands
                .iter()
                .min_by_key(|&&i| {
                    let d = idle[i].pose.cell.manhattan(shelf.home) + shelf.home.manhattan(station.cell);
                    (d, idle[i].id())
                })
                .unwrap(),
            SchedulerPolicy::Rd => cands[rng.random_range(0..cands.len())],
        };
        taken[pick] = true;
        out.push(Assignment {
            task: task.id,
            agv: idle[pick].id(),
            decided_at: now,
        });
    }
    out
}
