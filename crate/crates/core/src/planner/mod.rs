//! Space-time path planning: single-agent search, prioritized planning, CBS,
//! and conflict detection over footprint occupancy.

mod cbs;
mod prioritized;
mod search;
mod timeline;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::failures::SafetyCorridor;
use crate::geom::{Cell, Heading, Pose, Rect};
use crate::world::{AgvId, AgvSpec, AgvState, Layout, Terrain};

pub use cbs::{plan_cbs, plan_cbs_limited};
pub use prioritized::{plan_prioritized, plan_prioritized_ordered};
pub use search::{search, SearchOutcome, SearchSpec};
pub use timeline::{window_collides, Blocked, LastUse, Motion, ReservationTable, Timeline};

/// Length of the Wait path handed to an agent whose search failed.
pub const BACKOFF_STEPS: u32 = 5;
/// Default CT-node budget for CBS before falling back to prioritized planning.
pub const DEFAULT_NODE_BUDGET: u32 = 10_000;
/// Default cap on low-level expansions within one CBS call.
pub const DEFAULT_EXPANSION_BUDGET: u64 = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Cw,
    Ccw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Move(Heading),
    Rotate(Turn),
    Wait,
    Lift,
    Drop,
}

impl Action {
    /// Tie-break rank: Move < Rotate < Wait.
    pub fn rank(self) -> u8 {
        match self {
            Action::Move(_) => 0,
            Action::Rotate(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathState {
    pub cell: Cell,
    pub heading: Heading,
    pub step: u32,
}

impl PathState {
    pub fn new(pose: Pose, step: u32) -> Self {
        Self {
            cell: pose.cell,
            heading: pose.heading,
            step,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.cell, self.heading)
    }
}

/// A discrete space-time plan. `states[i] --actions[i]--> states[i+1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedPath {
    pub agv: AgvId,
    pub states: Vec<PathState>,
    pub actions: Vec<Action>,
}

impl TimedPath {
    pub fn stay(agv: AgvId, pose: Pose, step: u32) -> Self {
        Self {
            agv,
            states: vec![PathState::new(pose, step)],
            actions: Vec::new(),
        }
    }

    pub fn wait_in_place(agv: AgvId, pose: Pose, step: u32, steps: u32) -> Self {
        let mut p = Self::stay(agv, pose, step);
        for i in 1..=steps {
            p.states.push(PathState::new(pose, step + i));
            p.actions.push(Action::Wait);
        }
        p
    }

    pub fn start_step(&self) -> u32 {
        self.states[0].step
    }

    pub fn arrival_step(&self) -> u32 {
        self.states.last().unwrap().step
    }

    pub fn cost(&self) -> u32 {
        self.arrival_step() - self.start_step()
    }

    pub fn goal(&self) -> Cell {
        self.states.last().unwrap().cell
    }

    pub fn rotations(&self) -> usize {
        self.actions.iter().filter(|a| matches!(a, Action::Rotate(_))).count()
    }

    /// Check the action/state consistency rules for an agent.
    pub fn validate(&self, spec: &AgvSpec) -> Result<(), PathError> {
        let bad = |i: usize, why: &str| PathError {
            agv: self.agv,
            index: i,
            reason: why.to_string(),
        };
        if self.states.len() != self.actions.len() + 1 {
            return Err(bad(0, "states must outnumber actions by one"));
        }
        for (i, a) in self.actions.iter().enumerate() {
            let (s, e) = (&self.states[i], &self.states[i + 1]);
            if e.step <= s.step {
                return Err(bad(i, "steps must strictly increase"));
            }
            let dur = e.step - s.step;
            match *a {
                Action::Move(d) => {
                    if e.cell != s.cell.step(d) {
                        return Err(bad(i, "move must advance one cell"));
                    }
                    if e.heading != d || (spec.turn_cost > 0 && s.heading != d) {
                        return Err(bad(i, "move must follow the heading"));
                    }
                    if dur != spec.steps_per_cell {
                        return Err(bad(i, "move must take steps_per_cell steps"));
                    }
                }
                Action::Rotate(t) => {
                    let want = match t {
                        Turn::Cw => s.heading.cw(),
                        Turn::Ccw => s.heading.ccw(),
                    };
                    if e.cell != s.cell || e.heading != want {
                        return Err(bad(i, "rotate must turn 90 degrees in place"));
                    }
                    if spec.turn_cost == 0 || dur != spec.turn_cost {
                        return Err(bad(i, "rotate must take turn_cost steps"));
                    }
                }
                Action::Wait | Action::Lift | Action::Drop => {
                    if e.cell != s.cell || e.heading != s.heading || dur != 1 {
                        return Err(bad(i, "dwell must keep the pose for one step"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathError {
    pub agv: AgvId,
    pub index: usize,
    pub reason: String,
}

impl fmt::Display for PathError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "malformed path for agv {} at action {}: {}",
            self.agv, self.index, self.reason
        )
    }
}

impl std::error::Error for PathError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    Vertex,
    Edge,
    Corridor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub a: AgvId,
    /// `None` for a corridor conflict.
    pub b: Option<AgvId>,
    pub step: u32,
    pub kind: ConflictKind,
    /// A cell in the overlap.
    pub cell: Cell,
}

/// CBS constraint on one agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Constraint {
    /// The agent may not occupy `cell` at `step`.
    Vertex { agv: AgvId, cell: Cell, step: u32 },
    /// The agent may not perform this exact transition over `step → step+1`.
    Edge {
        agv: AgvId,
        step: u32,
        from: Rect,
        to: Rect,
        motion: Option<Motion>,
    },
}

impl Constraint {
    pub fn agv(&self) -> AgvId {
        match *self {
            Constraint::Vertex { agv, .. } | Constraint::Edge { agv, .. } => agv,
        }
    }

    /// Whether the window transition violates this constraint.
    pub fn forbids(&self, step: u32, from: Rect, to: Rect, motion: Option<Motion>) -> bool {
        match *self {
            Constraint::Vertex { cell, step: s, .. } => s == step + 1 && to.contains(cell),
            Constraint::Edge {
                step: s,
                from: f,
                to: t,
                motion: m,
                ..
            } => s == step && f == from && t == to && m == motion,
        }
    }
}

/// Where a planned agent should end up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    Cell(Cell),
    /// Any anchor flagged in the environment's rest grid.
    Rest,
}

/// One agent to plan.
#[derive(Clone, Debug)]
pub struct PlanRequest {
    pub spec: AgvSpec,
    pub start: Pose,
    pub goal: Goal,
    pub carrying: bool,
    /// Blocked cells this agent may still occupy (it was inside a corridor
    /// when the corridor appeared).
    pub exempt: Vec<Cell>,
}

impl PlanRequest {
    pub fn new(spec: AgvSpec, start: Pose, goal: Cell) -> Self {
        Self {
            spec,
            start,
            goal: Goal::Cell(goal),
            carrying: false,
            exempt: Vec::new(),
        }
    }

    pub fn id(&self) -> AgvId {
        self.spec.id
    }
}

/// Static and dynamic environment shared by every search of a planning call.
#[derive(Clone, Copy)]
pub struct PlanEnv<'a> {
    pub terrain: &'a Terrain,
    pub blocked: &'a Blocked,
    /// Anchors where an idle agent may park (indexed like the terrain).
    pub rest: Option<&'a [bool]>,
    /// Maximum steps a single search may look ahead.
    pub horizon: u32,
}

/// Search window that comfortably covers any detour on the map.
pub fn default_horizon(width: i32, height: i32, max_steps_per_cell: u32) -> u32 {
    (4 * (width + height).max(1) as u32 * max_steps_per_cell.max(1)).max(64)
}

/// Result of a multi-agent planning call.
#[derive(Clone, Debug, Default)]
pub struct PlanOutcome {
    pub paths: BTreeMap<AgvId, TimedPath>,
    /// Agents whose search failed and received a Wait backoff path.
    pub failed: BTreeSet<AgvId>,
    /// Low-level node expansions across all searches.
    pub expansions: u64,
    pub searches: u32,
    /// CBS constraint-tree nodes expanded.
    pub ct_nodes: u32,
    /// CBS ran out of budget and the result came from prioritized planning.
    pub suboptimal: bool,
}

impl PlanOutcome {
    pub fn sum_of_costs(&self) -> u32 {
        self.paths.values().map(|p| p.cost()).sum()
    }
}

/// Single-agent search on a layout with every shelf at home and no other agents.
#[allow(clippy::too_many_arguments)]
pub fn low_level_search(
    agv: &AgvSpec,
    start: Pose,
    goal: Cell,
    layout: &Layout,
    constraints: &[Constraint],
    blocked: &BTreeSet<Cell>,
    start_step: u32,
    horizon: u32,
) -> Option<TimedPath> {
    let terrain = Terrain::new(layout);
    let mut b = Blocked::none(layout.width, layout.height);
    for c in blocked {
        if layout.in_bounds(*c) {
            b.add(*c, u32::MAX);
        }
    }
    let env = PlanEnv {
        terrain: &terrain,
        blocked: &b,
        rest: None,
        horizon,
    };
    let req = PlanRequest::new(agv.clone(), start, goal);
    let spec = SearchSpec {
        req: &req,
        start_step,
        constraints,
    };
    search(&spec, &env, &ReservationTable::new()).path
}

/// Single-agent replanning against the other agents' remaining timelines.
/// On failure the agent receives a Wait path of [`BACKOFF_STEPS`].
pub fn replan_agent(
    req: &PlanRequest,
    env: &PlanEnv<'_>,
    others: &ReservationTable,
    now: u32,
) -> (TimedPath, SearchOutcome) {
    let spec = SearchSpec {
        req,
        start_step: now,
        constraints: &[],
    };
    let out = search(&spec, env, others);
    let path = out
        .path
        .clone()
        .unwrap_or_else(|| TimedPath::wait_in_place(req.id(), req.start, now, BACKOFF_STEPS));
    (path, out)
}

/// Earliest conflict between two timelines: `(step, kind, cell)`.
pub fn first_conflict(a: &Timeline, b: &Timeline) -> Option<(u32, ConflictKind, Cell)> {
    let t0 = a.start.min(b.start);
    let t1 = a.end().max(b.end());
    for t in t0..=t1 {
        if let (Some(ra), Some(rb)) = (a.occ_at(t), b.occ_at(t)) {
            if let Some(x) = ra.intersection(&rb) {
                return Some((t, ConflictKind::Vertex, Cell::new(x.x0, x.y0)));
            }
        }
        if t == t1 || !a.present(t + 1) || !b.present(t + 1) {
            continue;
        }
        let (af, at) = (a.occ_at(t).unwrap(), a.occ_at(t + 1).unwrap());
        let (bf, bt) = (b.occ_at(t).unwrap(), b.occ_at(t + 1).unwrap());
        if window_collides(af, at, a.motion_at(t), bf, bt, b.motion_at(t)) {
            let x = af
                .union(&at)
                .intersection(&bf.union(&bt))
                .expect("colliding windows overlap");
            let kind = if at.intersects(&bt) {
                ConflictKind::Vertex
            } else {
                ConflictKind::Edge
            };
            if kind == ConflictKind::Vertex {
                let v = at.intersection(&bt).unwrap();
                return Some((t + 1, kind, Cell::new(v.x0, v.y0)));
            }
            return Some((t, kind, Cell::new(x.x0, x.y0)));
        }
    }
    None
}

/// Earliest conflict among a set of paths and active corridors.
pub fn detect_conflicts(
    paths: &[TimedPath],
    footprints: &BTreeMap<AgvId, u8>,
    corridors: &[SafetyCorridor],
) -> Option<Conflict> {
    let mut sorted: Vec<&TimedPath> = paths.iter().collect();
    sorted.sort_by_key(|p| p.agv);
    let tls: Vec<Timeline> = sorted
        .iter()
        .map(|p| Timeline::from_path(p, footprints.get(&p.agv).copied().unwrap_or(1)))
        .collect();
    let mut best: Option<Conflict> = None;
    let mut consider = |c: Conflict| {
        let key = |c: &Conflict| (c.step, c.a, c.b);
        if best.as_ref().is_none_or(|b| key(&c) < key(b)) {
            best = Some(c);
        }
    };
    for i in 0..tls.len() {
        for j in i + 1..tls.len() {
            if let Some((step, kind, cell)) = first_conflict(&tls[i], &tls[j]) {
                consider(Conflict {
                    a: tls[i].agv,
                    b: Some(tls[j].agv),
                    step,
                    kind,
                    cell,
                });
            }
        }
        for cor in corridors {
            if cor.cause_agv == tls[i].agv {
                continue;
            }
            let exempt = cor.exempt_cells(tls[i].agv);
            let end = tls[i].end().max(cor.active_from);
            for t in cor.active_from.max(tls[i].start)..cor.active_until.min(end + 1) {
                let r = tls[i].occ_at(t).unwrap();
                if let Some(c) = r.cells().find(|c| cor.cells.contains(c) && !exempt.contains(c)) {
                    consider(Conflict {
                        a: tls[i].agv,
                        b: None,
                        step: t,
                        kind: ConflictKind::Corridor,
                        cell: c,
                    });
                    break;
                }
            }
        }
    }
    best
}

/// Timeline of an AGV from `now` on: any move in progress, then the rest of
/// its plan (which starts where the move ends), then standing still.
pub fn agent_timeline(agv: &AgvState, now: u32) -> Timeline {
    let fp = agv.spec.footprint;
    let here = Rect::footprint(agv.pose.cell, fp);
    let mut tl = Timeline::stationary(agv.id(), here, now);
    if let Some(f) = &agv.in_flight {
        tl.set_first(f.occupancy(fp));
        let dst = Rect::footprint(f.to.cell, fp);
        let total = f.ends - f.started;
        let done = now - f.started;
        match f.action {
            Action::Move(d) => tl.push_translate_rest(here, dst, d, total, done),
            _ => tl.push_stay(total - done),
        }
    }
    if let Some(plan) = &agv.plan {
        let path = &plan.path;
        for i in plan.cursor..path.actions.len() {
            let (s, e) = (&path.states[i], &path.states[i + 1]);
            let dur = e.step - s.step;
            match path.actions[i] {
                Action::Move(d) => tl.push_translate(Rect::footprint(e.cell, fp), d, dur),
                _ => tl.push_stay(dur),
            }
        }
    }
    tl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::AgvSpec;

    #[test]
    fn swap_is_an_edge_conflict_at_the_earlier_step() {
        let mk = |id: u32, from: i32, to: i32, d: Heading| TimedPath {
            agv: AgvId(id),
            states: vec![
                PathState::new(Pose::new(Cell::new(from, 0), d), 3),
                PathState::new(Pose::new(Cell::new(from, 0), d), 4),
                PathState::new(Pose::new(Cell::new(to, 0), d), 5),
            ],
            actions: vec![Action::Wait, Action::Move(d)],
        };
        let paths = [mk(0, 2, 3, Heading::E), mk(1, 3, 2, Heading::W)];
        let fps = BTreeMap::from([(AgvId(0), 1), (AgvId(1), 1)]);
        let c = detect_conflicts(&paths, &fps, &[]).unwrap();
        assert_eq!(c.kind, ConflictKind::Edge);
        assert_eq!(c.step, 4);
    }

    #[test]
    fn big_footprint_vertex_conflict() {
        let big = TimedPath::wait_in_place(AgvId(0), Pose::new(Cell::new(4, 4), Heading::N), 0, 10);
        let mut small = TimedPath::stay(AgvId(1), Pose::new(Cell::new(5, 9), Heading::N), 3);
        let mut c = Cell::new(5, 9);
        for s in 4..=7 {
            c = c.step(Heading::N);
            small.states.push(PathState::new(Pose::new(c, Heading::N), s));
            small.actions.push(Action::Move(Heading::N));
        }
        assert_eq!(c, Cell::new(5, 5));
        let fps = BTreeMap::from([(AgvId(0), 2), (AgvId(1), 1)]);
        let got = detect_conflicts(&[big, small], &fps, &[]).unwrap();
        assert_eq!(
            (got.step, got.kind, got.cell),
            (7, ConflictKind::Vertex, Cell::new(5, 5))
        );
    }

    #[test]
    fn crossing_at_different_steps_is_fine() {
        let spec = AgvSpec::unit(0);
        let layout = Layout::empty(5, 5);
        let a = low_level_search(
            &spec,
            Pose::new(Cell::new(0, 2), Heading::E),
            Cell::new(4, 2),
            &layout,
            &[],
            &BTreeSet::new(),
            0,
            64,
        )
        .unwrap();
        let mut spec_b = spec.clone();
        spec_b.id = AgvId(1);
        let b = low_level_search(
            &spec_b,
            Pose::new(Cell::new(2, 0), Heading::S),
            Cell::new(2, 4),
            &layout,
            &[],
            &BTreeSet::new(),
            5,
            64,
        )
        .unwrap();
        let fps = BTreeMap::from([(AgvId(0), 1), (AgvId(1), 1)]);
        assert_eq!(detect_conflicts(&[a, b], &fps, &[]), None);
    }

    #[test]
    fn path_validation_catches_teleports() {
        let spec = AgvSpec::unit(0);
        let mut p = TimedPath::wait_in_place(AgvId(0), Pose::new(Cell::new(0, 0), Heading::N), 0, 2);
        assert!(p.validate(&spec).is_ok());
        p.states[1].cell = Cell::new(3, 3);
        assert!(p.validate(&spec).is_err());
    }
}
