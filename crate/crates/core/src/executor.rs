//! Continuous realization of discrete plans, swept-collision checks and the
//! per-step executor.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::failures::SafetyCorridor;
use crate::geom::{Cell, Heading, Pose, Rect};
use crate::planner::{agent_timeline, window_collides, Action, Motion, PathError, TimedPath, Turn};
use crate::world::{AgvId, AgvSpec, AgvState, Terrain};

/// Involuntary dwell steps after which an agent is replanned.
pub const BLOCKED_THRESHOLD: u32 = 5;
/// Samples per step unit used by default.
pub const DEFAULT_RESOLUTION: u32 = 10;
const EPS: f64 = 1e-9;

/// The plan an AGV is following. `cursor` indexes the next action to start;
/// an action in progress has already been consumed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivePlan {
    pub path: TimedPath,
    pub cursor: usize,
    /// Backoff plan handed out after a failed search.
    pub fallback: bool,
}

impl ActivePlan {
    pub fn new(path: TimedPath, fallback: bool) -> Self {
        Self {
            path,
            cursor: 0,
            fallback,
        }
    }

    pub fn remaining(&self) -> usize {
        self.path.actions.len() - self.cursor
    }
}

/// A multi-step move or rotation being executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InFlight {
    pub action: Action,
    pub from: Pose,
    pub to: Pose,
    pub started: u32,
    pub ends: u32,
}

impl InFlight {
    /// Cells held while the action runs: source and destination.
    pub fn occupancy(&self, footprint: u8) -> Rect {
        Rect::footprint(self.from.cell, footprint).union(&Rect::footprint(self.to.cell, footprint))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerReason {
    Blocked,
    CorridorIntersect,
    Infeasible,
    IdleWithTask,
}

/// Inflation of every footprint during collision checks, in cell units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyMargin {
    pub radius: f64,
}

impl SafetyMargin {
    pub const ZERO: SafetyMargin = SafetyMargin { radius: 0.0 };

    pub fn new(radius: f64) -> Option<Self> {
        (0.0..0.5).contains(&radius).then_some(Self { radius })
    }
}

impl Default for SafetyMargin {
    fn default() -> Self {
        Self { radius: 0.05 }
    }
}

/// Planar pose: anchor position in cells, heading in quarter turns from north.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl ContPose {
    pub fn from_pose(p: Pose) -> Self {
        Self {
            x: p.cell.x as f64,
            y: p.cell.y as f64,
            heading: p.heading.quarter_turns(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Translate,
    Rotate,
    Dwell,
}

/// Constant-velocity piece of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub kind: SegmentKind,
    pub start_pose: ContPose,
    /// Rotations keep the heading unwrapped (start ± 1) so interpolation is linear.
    pub end_pose: ContPose,
    pub start_time: f64,
    pub end_time: f64,
}

impl MotionSegment {
    fn pose_at(&self, t: f64) -> ContPose {
        let f = ((t - self.start_time) / (self.end_time - self.start_time)).clamp(0.0, 1.0);
        let lerp = |a: f64, b: f64| a + (b - a) * f;
        ContPose {
            x: lerp(self.start_pose.x, self.end_pose.x),
            y: lerp(self.start_pose.y, self.end_pose.y),
            heading: lerp(self.start_pose.heading, self.end_pose.heading).rem_euclid(4.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agv: AgvId,
    pub start_time: f64,
    pub start_pose: ContPose,
    pub segments: Vec<MotionSegment>,
}

impl Trajectory {
    pub fn end_time(&self) -> f64 {
        self.segments.last().map_or(self.start_time, |s| s.end_time)
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time
    }

    /// Pose at time `t`, held constant outside the trajectory's span.
    pub fn pose_at(&self, t: f64) -> ContPose {
        if self.segments.is_empty() || t <= self.start_time {
            return self.start_pose;
        }
        let i = self.segments.partition_point(|s| s.end_time <= t);
        match self.segments.get(i) {
            Some(s) => s.pose_at(t),
            None => {
                let mut p = self.segments.last().unwrap().end_pose;
                p.heading = p.heading.rem_euclid(4.0);
                p
            }
        }
    }
}

/// Turn a discrete plan into constant-velocity segments. With `turn_cost` 0
/// a heading change happens instantly at the start of the following move.
pub fn realize_plan(path: &TimedPath, spec: &AgvSpec) -> Result<Trajectory, PathError> {
    path.validate(spec)?;
    let first = path.states[0];
    let mut traj = Trajectory {
        agv: path.agv,
        start_time: first.step as f64,
        start_pose: ContPose::from_pose(first.pose()),
        segments: Vec::with_capacity(path.actions.len()),
    };
    for (i, a) in path.actions.iter().enumerate() {
        let (s, e) = (path.states[i], path.states[i + 1]);
        let mut start_pose = ContPose::from_pose(s.pose());
        let mut end_pose = ContPose::from_pose(e.pose());
        let kind = match a {
            Action::Move(d) => {
                start_pose.heading = d.quarter_turns();
                SegmentKind::Translate
            }
            Action::Rotate(t) => {
                end_pose.heading = start_pose.heading
                    + match t {
                        Turn::Cw => 1.0,
                        Turn::Ccw => -1.0,
                    };
                SegmentKind::Rotate
            }
            Action::Wait | Action::Lift | Action::Drop => SegmentKind::Dwell,
        };
        traj.segments.push(MotionSegment {
            kind,
            start_pose,
            end_pose,
            start_time: s.step as f64,
            end_time: e.step as f64,
        });
    }
    Ok(traj)
}

/// The other party of a collision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum Collider {
    Agv(AgvId),
    Obstacle(Cell),
    Shelf(Cell),
    Corridor(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub time: f64,
    pub agv: AgvId,
    pub other: Collider,
}

/// Obstacles, and the stored shelves that loaded AGVs must avoid.
#[derive(Clone, Debug, Default)]
pub struct StaticScene {
    pub obstacles: BTreeSet<Cell>,
    pub shelves: BTreeSet<Cell>,
    pub carrying: BTreeSet<AgvId>,
}

#[derive(Clone, Copy, Debug)]
struct FRect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl FRect {
    fn at(x: f64, y: f64, size: u8, margin: f64) -> Self {
        let s = size as f64;
        Self {
            x0: x - margin,
            y0: y - margin,
            x1: x + s + margin,
            y1: y + s + margin,
        }
    }

    /// Positive-area overlap; touching edges do not count.
    fn overlaps(&self, o: &FRect) -> bool {
        self.x0 < o.x1 - EPS && o.x0 < self.x1 - EPS && self.y0 < o.y1 - EPS && o.y0 < self.y1 - EPS
    }

    fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let (cx0, cx1) = (self.x0.floor() as i32, self.x1.ceil() as i32);
        let (cy0, cy1) = (self.y0.floor() as i32, self.y1.ceil() as i32);
        (cy0..cy1).flat_map(move |y| (cx0..cx1).map(move |x| Cell::new(x, y)))
    }

    fn touches_cell(&self, c: Cell) -> bool {
        self.overlaps(&FRect::at(c.x as f64, c.y as f64, 1, 0.0))
    }
}

/// Whether a corridor counts at continuous time `t`: it must be active at
/// both neighbouring integer steps (matching the discrete blocking rule).
fn corridor_live(c: &SafetyCorridor, t: f64) -> bool {
    c.is_active(t.floor() as u32) && c.is_active(t.ceil() as u32)
}

struct Sampler<'a> {
    footprints: &'a BTreeMap<AgvId, u8>,
    margin: f64,
    statics: &'a StaticScene,
    corridors: &'a [SafetyCorridor],
    seen: BTreeSet<(AgvId, Collider)>,
    out: Vec<CollisionEvent>,
}

impl Sampler<'_> {
    fn report(&mut self, time: f64, agv: AgvId, other: Collider, now_overlapping: &mut BTreeSet<(AgvId, Collider)>) {
        now_overlapping.insert((agv, other));
        if !self.seen.contains(&(agv, other)) {
            self.out.push(CollisionEvent { time, agv, other });
        }
    }

    fn sample(&mut self, time: f64, poses: &[(AgvId, f64, f64)]) {
        let mut now = BTreeSet::new();
        let rects: Vec<FRect> = poses
            .iter()
            .map(|(a, x, y)| FRect::at(*x, *y, self.footprints.get(a).copied().unwrap_or(1), self.margin))
            .collect();
        for i in 0..poses.len() {
            for j in i + 1..poses.len() {
                if rects[i].overlaps(&rects[j]) {
                    let (a, b) = (poses[i].0.min(poses[j].0), poses[i].0.max(poses[j].0));
                    self.report(time, a, Collider::Agv(b), &mut now);
                }
            }
            let agv = poses[i].0;
            let loaded = self.statics.carrying.contains(&agv);
            let cells: Vec<Cell> = rects[i].cells().filter(|c| rects[i].touches_cell(*c)).collect();
            for c in &cells {
                if self.statics.obstacles.contains(c) {
                    self.report(time, agv, Collider::Obstacle(*c), &mut now);
                }
                if loaded && self.statics.shelves.contains(c) {
                    self.report(time, agv, Collider::Shelf(*c), &mut now);
                }
            }
            for cor in self.corridors {
                if cor.cause_agv == agv || !corridor_live(cor, time) {
                    continue;
                }
                let ex = cor.exempt_cells(agv);
                if cells.iter().any(|c| cor.cells.contains(c) && !ex.contains(c)) {
                    self.report(time, agv, Collider::Corridor(cor.id), &mut now);
                }
            }
        }
        self.seen = now;
    }
}

/// Sample all trajectories `resolution` times per step unit over their joint
/// span. An event is reported when an overlap begins.
pub fn check_continuous_collisions(
    trajectories: &[Trajectory],
    footprints: &BTreeMap<AgvId, u8>,
    margin: SafetyMargin,
    statics: &StaticScene,
    corridors: &[SafetyCorridor],
    resolution: u32,
) -> Vec<CollisionEvent> {
    assert!(resolution >= 2, "resolution must be at least 2");
    if trajectories.is_empty() {
        return Vec::new();
    }
    let t0 = trajectories.iter().map(|t| t.start_time).fold(f64::INFINITY, f64::min);
    let t1 = trajectories
        .iter()
        .map(|t| t.end_time())
        .fold(f64::NEG_INFINITY, f64::max);
    let n = ((t1 - t0) * resolution as f64).round() as u64;
    let mut s = Sampler {
        footprints,
        margin: margin.radius,
        statics,
        corridors,
        seen: BTreeSet::new(),
        out: Vec::new(),
    };
    for k in 0..=n {
        let time = t0 + k as f64 / resolution as f64;
        let poses: Vec<(AgvId, f64, f64)> = trajectories
            .iter()
            .map(|tr| {
                let p = tr.pose_at(time);
                (tr.agv, p.x, p.y)
            })
            .collect();
        s.sample(time, &poses);
    }
    s.out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Progressed(Pose),
    TriggerReplan(TriggerReason),
}

/// What the executor needs to see of the world for one step.
pub struct ExecContext<'a> {
    pub terrain: &'a Terrain,
    pub corridors: &'a [SafetyCorridor],
    pub margin: SafetyMargin,
    pub resolution: u32,
}

#[derive(Clone, Debug, Default)]
pub struct ExecReport {
    /// One entry per active AGV, by id.
    pub outcomes: Vec<(AgvId, StepOutcome)>,
    /// Every trigger raised, possibly several per AGV.
    pub triggers: Vec<(AgvId, TriggerReason)>,
    pub held: Vec<AgvId>,
    pub collisions: Vec<CollisionEvent>,
}

#[derive(Clone, Copy)]
struct Intent {
    from: Rect,
    to: Rect,
    motion: Option<Motion>,
    /// Starts a move this step and may be held back instead.
    holdable: bool,
}

fn static_violation(agv: &AgvState, to: Rect, ctx: &ExecContext<'_>, t: u32) -> bool {
    if !to.within(ctx.terrain.width, ctx.terrain.height) {
        return true;
    }
    let loaded = agv.carrying.is_some();
    to.cells()
        .any(|c| ctx.terrain.is_obstacle(c) || (loaded && ctx.terrain.stored_shelf_at(c).is_some()))
        || ctx
            .corridors
            .iter()
            .any(|cor| cor.is_active(t) && cor.intrusion(agv.id(), &to).is_some())
}

/// Anchor position at the start and end of the window `now → now+1`.
fn window_positions(agv: &AgvState, held: bool, now: u32) -> ((f64, f64), (f64, f64)) {
    let c = agv.pose.cell;
    let here = (c.x as f64, c.y as f64);
    let along = |d: Heading, frac: f64| {
        let (dx, dy) = d.delta();
        (c.x as f64 + dx as f64 * frac, c.y as f64 + dy as f64 * frac)
    };
    if let Some(f) = &agv.in_flight {
        if let Action::Move(d) = f.action {
            let span = (f.ends - f.started) as f64;
            return (
                along(d, (now - f.started) as f64 / span),
                along(d, (now + 1 - f.started) as f64 / span),
            );
        }
        return (here, here);
    }
    if held || !agv.is_active() {
        return (here, here);
    }
    if let Some(plan) = &agv.plan {
        if plan.cursor < plan.path.actions.len() {
            if let Action::Move(d) = plan.path.actions[plan.cursor] {
                let s = &plan.path.states;
                let dur = (s[plan.cursor + 1].step - s[plan.cursor].step) as f64;
                return (here, along(d, 1.0 / dur));
            }
        }
    }
    (here, here)
}

/// Advance every AGV by one step. Agents about to start a move that would
/// collide are held in place (the lower id keeps going) and asked to replan.
pub fn step_execute(agvs: &mut [AgvState], ctx: &ExecContext<'_>, now: u32) -> ExecReport {
    let mut report = ExecReport::default();
    let n = agvs.len();

    let mut intents: Vec<Intent> = agvs
        .iter()
        .map(|a| {
            if !a.is_active() {
                let r = a.occupancy();
                return Intent {
                    from: r,
                    to: r,
                    motion: None,
                    holdable: false,
                };
            }
            let tl = agent_timeline(a, now);
            let from = tl.occ_at(now).unwrap();
            let to = tl.occ_at(now + 1).unwrap();
            let motion = tl.motion_at(now);
            Intent {
                from,
                to,
                motion,
                holdable: a.in_flight.is_none() && (motion.is_some() || from != to),
            }
        })
        .collect();

    let mut held = vec![false; n];
    let hold = |i: usize, intents: &mut [Intent], held: &mut [bool]| {
        held[i] = true;
        intents[i] = Intent {
            from: intents[i].from,
            to: intents[i].from,
            motion: None,
            holdable: false,
        };
    };
    loop {
        let mut changed = false;
        for i in 0..n {
            if intents[i].holdable && static_violation(&agvs[i], intents[i].to, ctx, now + 1) {
                hold(i, &mut intents, &mut held);
                changed = true;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (intents[i], intents[j]);
                if !window_collides(a.from, a.to, a.motion, b.from, b.to, b.motion) {
                    continue;
                }
                let loser = if b.holdable {
                    Some(j)
                } else if a.holdable {
                    Some(i)
                } else {
                    None
                };
                if let Some(k) = loser {
                    hold(k, &mut intents, &mut held);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Continuous check of the window as it will actually be executed.
    let positions: Vec<((f64, f64), (f64, f64))> = agvs
        .iter()
        .enumerate()
        .map(|(i, a)| window_positions(a, held[i], now))
        .collect();
    let footprints: BTreeMap<AgvId, u8> = agvs.iter().map(|a| (a.id(), a.spec.footprint)).collect();
    let statics = StaticScene {
        obstacles: BTreeSet::new(),
        shelves: BTreeSet::new(),
        carrying: BTreeSet::new(),
    };
    let mut sampler = Sampler {
        footprints: &footprints,
        margin: ctx.margin.radius,
        statics: &statics,
        corridors: ctx.corridors,
        seen: BTreeSet::new(),
        out: Vec::new(),
    };
    let res = ctx.resolution.max(2);
    for k in 0..=res {
        let f = k as f64 / res as f64;
        let poses: Vec<(AgvId, f64, f64)> = agvs
            .iter()
            .zip(&positions)
            .map(|(a, ((x0, y0), (x1, y1)))| (a.id(), x0 + (x1 - x0) * f, y0 + (y1 - y0) * f))
            .collect();
        sampler.sample(now as f64 + f, &poses);
    }
    report.collisions = sampler.out;
    for (a, p) in agvs.iter().zip(&positions) {
        // Static geometry is exact on the grid: check the swept cells.
        let fp = a.spec.footprint;
        let (x0, y0) = p.0;
        let (x1, y1) = p.1;
        let swept = FRect::at(x0.min(x1), y0.min(y1), fp, 0.0);
        let swept = FRect {
            x1: swept.x1 + (x1 - x0).abs(),
            y1: swept.y1 + (y1 - y0).abs(),
            ..swept
        };
        for c in swept.cells().filter(|c| swept.touches_cell(*c)) {
            if c.x < 0 || c.y < 0 || c.x >= ctx.terrain.width || c.y >= ctx.terrain.height {
                continue;
            }
            if ctx.terrain.is_obstacle(c) {
                report.collisions.push(CollisionEvent {
                    time: now as f64,
                    agv: a.id(),
                    other: Collider::Obstacle(c),
                });
            } else if a.carrying.is_some() && ctx.terrain.stored_shelf_at(c).is_some() {
                report.collisions.push(CollisionEvent {
                    time: now as f64,
                    agv: a.id(),
                    other: Collider::Shelf(c),
                });
            }
        }
    }

    for (i, agv) in agvs.iter_mut().enumerate() {
        if !agv.is_active() {
            continue;
        }
        let id = agv.id();
        let mut triggers = Vec::new();
        if held[i] {
            report.held.push(id);
            agv.involuntary_dwell += 1;
            agv.plan = None;
            triggers.push(TriggerReason::Infeasible);
        } else if let Some(f) = agv.in_flight {
            if now + 1 >= f.ends {
                agv.pose = f.to;
                agv.in_flight = None;
            }
            agv.involuntary_dwell = 0;
        } else if let Some(plan) = agv.plan.as_mut() {
            if plan.cursor < plan.path.actions.len() {
                let c = plan.cursor;
                let (s, e) = (plan.path.states[c], plan.path.states[c + 1]);
                if s.step != now || s.cell != agv.pose.cell {
                    agv.plan = None;
                    triggers.push(TriggerReason::Infeasible);
                } else {
                    let action = plan.path.actions[c];
                    plan.cursor += 1;
                    match action {
                        Action::Move(_) | Action::Rotate(_) => {
                            agv.involuntary_dwell = 0;
                            if e.step - s.step == 1 {
                                agv.pose = e.pose();
                            } else {
                                agv.in_flight = Some(InFlight {
                                    action,
                                    from: s.pose(),
                                    to: e.pose(),
                                    started: now,
                                    ends: e.step,
                                });
                            }
                        }
                        _ => {
                            if plan.fallback {
                                agv.involuntary_dwell += 1;
                            }
                        }
                    }
                }
            }
        }
        if agv.plan.as_ref().is_some_and(|p| p.cursor >= p.path.actions.len()) {
            agv.plan = None;
        }
        if agv.involuntary_dwell >= BLOCKED_THRESHOLD {
            agv.involuntary_dwell = 0;
            triggers.push(TriggerReason::Blocked);
        }
        if agv.plan.is_some() {
            let tl = agent_timeline(agv, now + 1);
            let end = tl.end().max(now + 1);
            let hit = ctx.corridors.iter().any(|cor| {
                (now + 1..=end).any(|t| cor.is_active(t) && cor.intrusion(id, &tl.occ_at(t).unwrap()).is_some())
            });
            if hit {
                triggers.push(TriggerReason::CorridorIntersect);
            }
        }
        triggers.sort();
        triggers.dedup();
        let outcome = match triggers.iter().max_by_key(|r| trigger_priority(**r)) {
            Some(r) => StepOutcome::TriggerReplan(*r),
            None => StepOutcome::Progressed(agv.pose),
        };
        report.triggers.extend(triggers.iter().map(|r| (id, *r)));
        report.outcomes.push((id, outcome));
    }
    report
}

fn trigger_priority(r: TriggerReason) -> u8 {
    match r {
        TriggerReason::Infeasible => 3,
        TriggerReason::CorridorIntersect => 2,
        TriggerReason::Blocked => 1,
        TriggerReason::IdleWithTask => 0,
    }
}
