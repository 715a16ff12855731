//! Authoritative simulation state and the per-step loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{EngineConfig, PlannerChoice};
use super::eventlog::{EventKind, EventLog};
use super::Metrics;
use crate::executor::{step_execute, ActivePlan, ExecContext, TriggerReason};
use crate::failures::{apply_recovery, build_corridor, sample_failures, FailureEvent, FailureSource, SafetyCorridor};
use crate::geom::{Cell, Pose, Rect};
use crate::orders::{
    advance_stage, decompose_order, generate_orders, stage_complete, Inventory, Order, OrderId, OrderStatus,
    StageContext, Task, TaskId, TaskStage, Unfulfillable,
};
use crate::planner::{
    agent_timeline, default_horizon, first_conflict, plan_cbs_limited, plan_prioritized_ordered, Blocked, Goal,
    PlanEnv, PlanOutcome, PlanRequest, ReservationTable, Timeline,
};
use crate::scheduler::schedule_step;
use crate::world::{AgvId, AgvState, Health, Layout, StationId, Terrain};
use crate::SimError;

const ORDER_STREAM: u64 = 1;
const SCHEDULER_STREAM: u64 = 2;
const FAILURE_STREAM: u64 = 3;
/// Failed give-way attempts after which an idle AGV is planned around.
const MAX_DODGE_FAILS: u32 = 3;

/// Counters gathered while running; they back the metrics and the
/// invariant checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    /// Planning phases in which at least one search ran.
    pub planning_calls: u32,
    pub planning_cost: f64,
    pub expansions: u64,
    pub failures: u32,
    pub collisions: u32,
    /// Steps at which an AGV stood on a corridor cell it was not allowed on.
    pub intrusions: u32,
    pub conservation_violations: u32,
    /// Pose changes of failed AGVs.
    pub failed_moves: u32,
    /// Steps each recovered AGV spent down.
    pub down_durations: Vec<u32>,
    pub holds: u32,
    pub replans: u32,
    pub stage_violations: u32,
}

#[derive(Clone)]
pub struct SimState {
    pub clock: u32,
    pub seed: u64,
    pub config: Arc<EngineConfig>,
    pub terrain: Terrain,
    /// Sorted by id.
    pub agvs: Vec<AgvState>,
    /// Indexed by order id, sorted by release step.
    pub orders: Vec<Order>,
    /// Indexed by task id.
    pub tasks: Vec<Task>,
    pub inventory: Inventory,
    pub corridors: Vec<SafetyCorridor>,
    pub active_failures: Vec<FailureEvent>,
    pub log: EventLog,
    pub stats: RunStats,
    rng_sched: ChaCha8Rng,
    rng_fail: ChaCha8Rng,
    released: usize,
    waiting: Vec<OrderId>,
    triggers: BTreeMap<AgvId, TriggerReason>,
    claims: BTreeMap<StationId, AgvId>,
    streak: Vec<u32>,
    /// Consecutive failed give-way attempts of idle AGVs.
    dodge_fails: Vec<u32>,
    injected: VecDeque<AgvId>,
    next_failure_id: u32,
    next_corridor_id: u32,
    repair: bool,
    initial_inventory: u64,
    down_pose: Vec<Option<(u32, Pose)>>,
    horizon: u32,
    finished: bool,
}

impl SimState {
    pub fn new(config: Arc<EngineConfig>, seed: u64) -> Result<Self, SimError> {
        config.validate()?;
        let layout = &config.layout;
        let skus = layout.sku_catalog();
        let stations: Vec<StationId> = layout.stations.iter().map(|s| s.id).collect();
        let orders = generate_orders(&config.pattern, &skus, &stations, seed)?;
        let mut rng_sched = ChaCha8Rng::seed_from_u64(seed);
        rng_sched.set_stream(SCHEDULER_STREAM);
        let mut rng_fail = ChaCha8Rng::seed_from_u64(seed);
        rng_fail.set_stream(FAILURE_STREAM);
        debug_assert_ne!(ORDER_STREAM, SCHEDULER_STREAM);
        let inventory = Inventory::from_layout(layout);
        let n = layout.agvs.len();
        let max_spc = layout.agvs.iter().map(|a| a.spec.steps_per_cell).max().unwrap_or(1);
        let mut state = Self {
            clock: 0,
            seed,
            terrain: Terrain::new(layout),
            agvs: layout.agvs.iter().map(AgvState::new).collect(),
            orders,
            tasks: Vec::new(),
            initial_inventory: inventory.total(),
            inventory,
            corridors: Vec::new(),
            active_failures: Vec::new(),
            log: EventLog::new(config.record_events),
            stats: RunStats::default(),
            rng_sched,
            rng_fail,
            released: 0,
            waiting: Vec::new(),
            triggers: BTreeMap::new(),
            claims: BTreeMap::new(),
            streak: vec![0; n],
            dodge_fails: vec![0; n],
            injected: VecDeque::new(),
            next_failure_id: 0,
            next_corridor_id: 0,
            repair: false,
            down_pose: vec![None; n],
            horizon: default_horizon(layout.width, layout.height, max_spc),
            finished: false,
            config,
        };
        let c = state.config.clone();
        state.log.push(
            0,
            EventKind::RunStart,
            json!({
                "seed": seed,
                "env": c.env_label,
                "scheduler": c.scheduler.as_str(),
                "planner": c.planner.label(),
                "pattern": c.pattern.label(),
                "horizon": c.horizon,
                "orders": state.orders.len(),
                "deterministic_ct": c.deterministic_ct,
            }),
        );
        Ok(state)
    }

    pub fn layout(&self) -> &Layout {
        &self.config.layout
    }

    pub fn agv_index(&self, id: AgvId) -> Option<usize> {
        self.agvs.binary_search_by_key(&id, |a| a.id()).ok()
    }

    /// All orders resolved, or the horizon reached.
    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Queue an on-demand failure for the next step boundary.
    pub fn inject_failure(&mut self, agv: AgvId) -> Result<(), SimError> {
        let i = self.agv_index(agv).ok_or(SimError::UnknownAgv(agv))?;
        if !self.agvs[i].is_active() || self.injected.contains(&agv) {
            return Err(SimError::NotActive(agv));
        }
        self.injected.push_back(agv);
        Ok(())
    }

    /// Advance one step. Returns false once the run is over.
    pub fn step(&mut self) -> bool {
        if self.finished {
            return false;
        }
        let now = self.clock;
        self.release_orders(now);
        self.failures_phase(now);
        self.schedule_phase(now);
        self.plan_phase(now);
        self.execute_phase(now);
        self.stage_phase(now);
        self.record_phase(now);
        self.clock += 1;
        let resolved = self.released == self.orders.len()
            && self
                .orders
                .iter()
                .all(|o| matches!(o.status, OrderStatus::Completed | OrderStatus::Expired));
        if resolved || self.clock >= self.config.horizon {
            self.finish();
        }
        !self.finished
    }

    fn finish(&mut self) {
        let now = self.clock;
        for o in &mut self.orders {
            if matches!(o.status, OrderStatus::Pending | OrderStatus::Assigned) {
                o.status = OrderStatus::Expired;
                self.log
                    .push(now, EventKind::Expired, json!({"order": o.id, "reason": "horizon"}));
            }
        }
        self.released = self.orders.len();
        let m = self.metrics();
        self.log.push(
            now,
            EventKind::RunEnd,
            serde_json::to_value(&m).expect("metrics serialize"),
        );
        self.finished = true;
    }

    pub fn metrics(&self) -> Metrics {
        let generated = self.orders.len();
        let completed: Vec<u32> = self.orders.iter().filter_map(|o| o.completed_step).collect();
        let all_done = completed.len() == generated;
        let makespan = if generated == 0 {
            0
        } else if all_done {
            completed.iter().copied().max().unwrap_or(0)
        } else {
            self.config.horizon
        };
        Metrics::compute(
            generated as u32,
            completed.len() as u32,
            makespan,
            self.stats.planning_cost,
            self.stats.planning_calls,
            self.stats.failures,
            self.stats.collisions,
        )
    }

    // Phase 1.
    fn release_orders(&mut self, now: u32) {
        while self.released < self.orders.len() && self.orders[self.released].release_step <= now {
            self.waiting.push(self.orders[self.released].id);
            self.released += 1;
        }
        if self.waiting.is_empty() {
            return;
        }
        let mut busy: BTreeSet<_> = self
            .tasks
            .iter()
            .filter(|t| t.stage != TaskStage::Done)
            .map(|t| t.shelf)
            .collect();
        let mut still = Vec::new();
        for oid in std::mem::take(&mut self.waiting) {
            let order = &self.orders[oid.0 as usize];
            let id = TaskId(self.tasks.len() as u32);
            match decompose_order(order, self.layout(), &self.inventory, &busy, id, now) {
                Ok(task) => {
                    busy.insert(task.shelf);
                    self.log.push(
                        now,
                        EventKind::Release,
                        json!({"order": oid, "task": id, "shelf": task.shelf, "station": task.station}),
                    );
                    self.tasks.push(task);
                }
                Err(Unfulfillable::ShelvesBusy) => still.push(oid),
                Err(Unfulfillable::OutOfStock) => {
                    self.orders[oid.0 as usize].status = OrderStatus::Expired;
                    self.log
                        .push(now, EventKind::Expired, json!({"order": oid, "reason": "out_of_stock"}));
                }
            }
        }
        self.waiting = still;
    }

    // Phase 2.
    fn failures_phase(&mut self, now: u32) {
        let cfg = self.config.clone();
        for (step, agv) in &cfg.scripted_failures {
            if *step == now && !self.injected.contains(agv) {
                self.injected.push_back(*agv);
            }
        }
        let mut events = Vec::new();
        let mut deferred = VecDeque::new();
        while let Some(agv) = self.injected.pop_front() {
            let Some(i) = self.agv_index(agv) else { continue };
            let a = &self.agvs[i];
            if !a.is_active() {
                self.log.push(
                    now,
                    EventKind::CommandRejected,
                    json!({"agv": agv, "reason": "not active"}),
                );
            } else if a.in_flight.is_some() {
                deferred.push_back(agv);
            } else {
                events.push(FailureEvent {
                    id: 0,
                    agv,
                    at: now,
                    recovery_at: now + cfg.failures.down_steps.max(1),
                    source: FailureSource::Injected,
                });
            }
        }
        self.injected = deferred;
        let candidates: Vec<AgvId> = self
            .agvs
            .iter()
            .filter(|a| a.is_active() && a.in_flight.is_none() && !events.iter().any(|e| e.agv == a.id()))
            .map(|a| a.id())
            .collect();
        events.extend(sample_failures(&cfg.failures, &candidates, &mut self.rng_fail, now, 0));

        for mut ev in events {
            ev.id = self.next_failure_id;
            self.next_failure_id += 1;
            let i = self.agv_index(ev.agv).unwrap();
            let (pose, fp) = (self.agvs[i].pose, self.agvs[i].spec.footprint);
            {
                let a = &mut self.agvs[i];
                a.health = Health::Failed {
                    recovery_at: ev.recovery_at,
                };
                a.plan = None;
                a.involuntary_dwell = 0;
            }
            self.down_pose[i] = Some((now, pose));
            self.triggers.remove(&ev.agv);
            self.stats.failures += 1;
            self.log.push(
                now,
                EventKind::Failure,
                json!({"id": ev.id, "agv": ev.agv, "at": ev.at, "recovery_at": ev.recovery_at,
                       "source": ev.source, "x": pose.cell.x, "y": pose.cell.y}),
            );
            let mut cor = build_corridor(&ev, pose, fp, self.layout(), self.next_corridor_id);
            self.next_corridor_id += 1;
            for a in &self.agvs {
                if a.id() == ev.agv {
                    continue;
                }
                let inside: Vec<Cell> = a.occupancy().cells().filter(|c| cor.cells.contains(c)).collect();
                if !inside.is_empty() {
                    cor.exempt.push((a.id(), inside));
                }
            }
            for (agv, _) in &cor.exempt {
                let j = self.agv_index(*agv).unwrap();
                if self.agvs[j].task.is_some() {
                    self.triggers.insert(*agv, TriggerReason::CorridorIntersect);
                }
            }
            self.log.push(
                now,
                EventKind::Corridor,
                json!({"id": cor.id, "cause": ev.id, "agv": ev.agv,
                       "cells": cor.cells.iter().map(|c| [c.x, c.y]).collect::<Vec<_>>(),
                       "active_from": cor.active_from, "active_until": cor.active_until,
                       "degenerate": cor.degenerate,
                       "exempt": cor.exempt.iter().map(|(a, _)| *a).collect::<Vec<_>>()}),
            );
            self.corridors.push(cor);
            self.active_failures.push(ev);
            self.repair = true;
        }

        let (recovered, ended) = apply_recovery(&mut self.active_failures, &mut self.corridors, now);
        for agv in recovered {
            let i = self.agv_index(agv).unwrap();
            let a = &mut self.agvs[i];
            a.health = Health::Active;
            a.plan = None;
            if let Some((at, pose)) = self.down_pose[i].take() {
                self.stats.down_durations.push(now - at);
                if pose != a.pose {
                    self.stats.failed_moves += 1;
                }
            }
            if a.task.is_some() {
                self.triggers.insert(agv, TriggerReason::IdleWithTask);
            }
            self.log.push(now, EventKind::Recovery, json!({"agv": agv}));
            self.repair = true;
        }
        for id in ended {
            self.log.push(now, EventKind::CorridorEnd, json!({"id": id}));
        }
    }

    // Phase 3.
    fn schedule_phase(&mut self, now: u32) {
        let mut pending: Vec<&Task> = self.tasks.iter().filter(|t| t.assigned_agv.is_none()).collect();
        if pending.is_empty() {
            return;
        }
        pending.sort_by_key(|t| (self.orders[t.order.0 as usize].release_step, t.id));
        let idle: Vec<&AgvState> = self
            .agvs
            .iter()
            .filter(|a| a.is_active() && a.task.is_none() && a.in_flight.is_none())
            .collect();
        if idle.is_empty() {
            return;
        }
        let cfg = self.config.clone();
        let assignments = schedule_step(cfg.scheduler, &pending, &idle, &cfg.layout, &mut self.rng_sched, now);
        for asg in assignments {
            let t = &mut self.tasks[asg.task.0 as usize];
            t.assigned_agv = Some(asg.agv);
            t.stage_entered = now;
            self.orders[t.order.0 as usize].status = OrderStatus::Assigned;
            let i = self.agv_index(asg.agv).unwrap();
            self.agvs[i].task = Some(asg.task);
            self.agvs[i].plan = None;
            self.triggers.remove(&asg.agv);
            self.log
                .push(now, EventKind::Assignment, json!({"task": asg.task, "agv": asg.agv}));
        }
    }

    fn task_of(&self, i: usize) -> Option<&Task> {
        self.agvs[i].task.map(|t| &self.tasks[t.0 as usize])
    }

    /// Where a tasked AGV must travel now, if anywhere.
    fn travel_goal(&self, i: usize) -> Option<Cell> {
        let task = self.task_of(i)?;
        let layout = self.layout();
        let shelf = layout.shelf(task.shelf).unwrap();
        match task.stage {
            TaskStage::GoToShelf | TaskStage::ReturnShelf => Some(shelf.home),
            TaskStage::CarryToStation => {
                if self.claims.get(&task.station) != Some(&self.agvs[i].id()) {
                    return None;
                }
                let st = layout.station(task.station).unwrap();
                Some(layout.station_anchor(st, self.agvs[i].spec.footprint))
            }
            _ => None,
        }
    }

    fn grant_claims(&mut self, now: u32) {
        let mut want: Vec<(TaskId, StationId, AgvId)> = self
            .agvs
            .iter()
            .filter_map(|a| {
                let t = &self.tasks[a.task?.0 as usize];
                (t.stage == TaskStage::CarryToStation).then_some((t.id, t.station, a.id()))
            })
            .collect();
        want.sort();
        for (task, station, agv) in want {
            if let std::collections::btree_map::Entry::Vacant(e) = self.claims.entry(station) {
                e.insert(agv);
                self.log.push(
                    now,
                    EventKind::Stage,
                    json!({"task": task, "agv": agv, "claim": station}),
                );
            }
        }
    }

    fn blocked_grid(&self) -> Blocked {
        let l = self.layout();
        let mut b = Blocked::none(l.width, l.height);
        for c in &self.corridors {
            for cell in &c.cells {
                b.add(*cell, c.active_until);
            }
        }
        b
    }

    fn exempt_cells(&self, agv: AgvId) -> Vec<Cell> {
        self.corridors
            .iter()
            .flat_map(|c| c.exempt_cells(agv).iter().copied())
            .collect()
    }

    /// Anchors where an idle AGV of this footprint may park.
    fn rest_grid(&self, fp: u8) -> Vec<bool> {
        let l = self.layout();
        let t = &self.terrain;
        let mut ok_cell = vec![false; t.cell_count()];
        for c in &l.parking {
            ok_cell[t.idx(*c)] = true;
        }
        for y in 0..l.height {
            for x in 0..l.width {
                let c = Cell::new(x, y);
                if t.stored_shelf_at(c).is_some() {
                    ok_cell[t.idx(c)] = true;
                }
            }
        }
        let mut avoid: Vec<Rect> = Vec::new();
        for st in &l.stations {
            avoid.push(Rect::cell(st.cell));
            avoid.push(Rect::footprint(l.station_anchor(st, 1), 1));
            avoid.push(Rect::footprint(l.station_anchor(st, 2), 2));
        }
        for task in self.tasks.iter().filter(|t| t.stage != TaskStage::Done) {
            avoid.push(l.shelf(task.shelf).unwrap().rect());
        }
        let corridor: BTreeSet<Cell> = self.corridors.iter().flat_map(|c| c.cells.iter().copied()).collect();
        let mut out = vec![false; t.cell_count()];
        for y in 0..l.height {
            for x in 0..l.width {
                let a = Cell::new(x, y);
                let r = Rect::footprint(a, fp);
                out[t.idx(a)] = t.anchor_ok(a, fp, false)
                    && r.cells().all(|c| ok_cell[t.idx(c)] && !corridor.contains(&c))
                    && !avoid.iter().any(|v| v.intersects(&r));
            }
        }
        out
    }

    /// What a tasked AGV plans around for AGV `j`. Idle AGVs only hold their
    /// cell briefly and are expected to give way; one that repeatedly fails
    /// to get out of the way holds it longer, and eventually for good.
    fn idle_reservation(&self, j: usize, now: u32) -> Timeline {
        let a = &self.agvs[j];
        let tl = agent_timeline(a, now);
        if !Self::is_idle(a) {
            return tl;
        }
        match self.dodge_fails[j] {
            0 => tl.with_until(now + 2),
            f if f < MAX_DODGE_FAILS => tl.with_until(now + 2 + 4 * f * a.spec.steps_per_cell),
            _ => tl,
        }
    }

    fn request_for(&self, i: usize, goal: Goal) -> PlanRequest {
        let a = &self.agvs[i];
        PlanRequest {
            spec: a.spec.clone(),
            start: a.pose,
            goal,
            carrying: a.carrying.is_some(),
            exempt: self.exempt_cells(a.id()),
        }
    }

    fn is_idle(a: &AgvState) -> bool {
        a.is_active() && a.task.is_none() && a.in_flight.is_none()
    }

    // Phase 4.
    fn plan_phase(&mut self, now: u32) {
        let started = Instant::now();
        self.grant_claims(now);
        let cfg = self.config.clone();
        let use_cbs = cfg.planner == PlannerChoice::Cbs;
        let blocked = self.blocked_grid();
        let mut expansions = 0u64;
        let mut searched = false;

        let mut want: Vec<(usize, Cell)> = Vec::new();
        for i in 0..self.agvs.len() {
            let a = &self.agvs[i];
            if !a.is_active() || a.in_flight.is_some() || a.task.is_none() {
                continue;
            }
            let Some(goal) = self.travel_goal(i) else {
                self.triggers.remove(&a.id());
                continue;
            };
            let trig = self.triggers.contains_key(&a.id());
            let needs =
                trig || (a.plan.is_none() && a.pose.cell != goal) || (use_cbs && self.repair && a.plan.is_some());
            if needs {
                want.push((i, goal));
            }
        }

        if !want.is_empty() {
            let planned: BTreeSet<usize> = want.iter().map(|(i, _)| *i).collect();
            let mut reserved = ReservationTable::new();
            for j in 0..self.agvs.len() {
                if planned.contains(&j) {
                    continue;
                }
                reserved.push(self.idle_reservation(j, now));
            }
            let requests: Vec<PlanRequest> = want.iter().map(|(i, g)| self.request_for(*i, Goal::Cell(*g))).collect();
            let env = PlanEnv {
                terrain: &self.terrain,
                blocked: &blocked,
                rest: None,
                horizon: self.horizon,
            };
            let outcome: PlanOutcome = if use_cbs {
                plan_cbs_limited(&requests, &env, &reserved, now, cfg.node_budget, cfg.expansion_budget)
            } else {
                let mut order: Vec<&PlanRequest> = requests.iter().collect();
                order.sort_by_key(|r| {
                    let k = self.agv_index(r.id()).unwrap();
                    (std::cmp::Reverse(self.streak[k]), r.id())
                });
                plan_prioritized_ordered(&order, &env, &reserved, now)
            };
            expansions += outcome.expansions;
            searched |= outcome.searches > 0;
            if outcome.suboptimal {
                self.log.push(
                    now,
                    EventKind::Planning,
                    json!({"fallback": true, "ct_nodes": outcome.ct_nodes}),
                );
            }
            for (i, _) in &want {
                let id = self.agvs[*i].id();
                let Some(path) = outcome.paths.get(&id) else { continue };
                let failed = outcome.failed.contains(&id);
                self.streak[*i] = if failed { self.streak[*i] + 1 } else { 0 };
                let reason = self.triggers.remove(&id).or_else(|| {
                    let a = &self.agvs[*i];
                    (a.plan.is_none() && self.tasks[a.task.unwrap().0 as usize].stage_entered < now)
                        .then_some(TriggerReason::IdleWithTask)
                });
                let kind = if reason.is_some() {
                    self.stats.replans += 1;
                    EventKind::Replan
                } else {
                    EventKind::Plan
                };
                self.log.push(
                    now,
                    kind,
                    json!({"agv": id, "cost": path.cost(), "arrival": path.arrival_step(),
                           "goal": [path.goal().x, path.goal().y], "backoff": failed, "reason": reason}),
                );
                self.agvs[*i].plan = Some(ActivePlan::new(path.clone(), failed));
            }
        }
        self.repair = false;

        let (e, s) = self.idle_phase(now, &blocked);
        expansions += e;
        searched |= s;

        if searched {
            let cost = if cfg.deterministic_ct {
                expansions as f64
            } else {
                started.elapsed().as_secs_f64() * 1000.0
            };
            self.stats.planning_calls += 1;
            self.stats.planning_cost += cost;
            self.stats.expansions += expansions;
            self.log.push(
                now,
                EventKind::Planning,
                json!({"cost": cost, "expansions": expansions}),
            );
        }
    }

    /// Send idle AGVs that are in the way, inside a corridor or off a rest
    /// cell to the nearest free rest cell.
    fn idle_phase(&mut self, now: u32, blocked: &Blocked) -> (u64, bool) {
        let idle: Vec<usize> = (0..self.agvs.len()).filter(|&i| Self::is_idle(&self.agvs[i])).collect();
        if idle.is_empty() {
            return (0, false);
        }
        let hard: Vec<Timeline> = self
            .agvs
            .iter()
            .filter(|a| !Self::is_idle(a))
            .map(|a| agent_timeline(a, now))
            .collect();
        let mut grids: BTreeMap<u8, Vec<bool>> = BTreeMap::new();
        let mut movers = Vec::new();
        for &i in &idle {
            let a = &self.agvs[i];
            self.triggers.remove(&a.id());
            let fp = a.spec.footprint;
            let grid = grids.entry(fp).or_insert_with(|| self.rest_grid(fp));
            let tl = agent_timeline(a, now);
            let conflict = hard.iter().any(|h| first_conflict(&tl, h).is_some());
            let in_corridor = self
                .corridors
                .iter()
                .any(|c| a.rect().cells().any(|x| c.cells.contains(&x)));
            let off_rest = a.plan.is_none() && !grid[self.terrain.idx(a.pose.cell)];
            if conflict || in_corridor || off_rest {
                movers.push(i);
            }
        }
        if movers.is_empty() {
            return (0, false);
        }
        let mut reserved = ReservationTable::from_timelines(hard);
        for &i in &idle {
            if !movers.contains(&i) {
                reserved.push(agent_timeline(&self.agvs[i], now));
            }
        }
        let mut expansions = 0;
        let mut searched = false;
        let fps: BTreeSet<u8> = movers.iter().map(|&i| self.agvs[i].spec.footprint).collect();
        for fp in fps {
            let group: Vec<usize> = movers
                .iter()
                .copied()
                .filter(|&i| self.agvs[i].spec.footprint == fp)
                .collect();
            let requests: Vec<PlanRequest> = group.iter().map(|&i| self.request_for(i, Goal::Rest)).collect();
            let order: Vec<&PlanRequest> = requests.iter().collect();
            let grid = &grids[&fp];
            let env = PlanEnv {
                terrain: &self.terrain,
                blocked,
                rest: Some(grid),
                horizon: self.horizon,
            };
            // Movers of other footprints not planned yet still hold their cells.
            let mut table = reserved.clone();
            for &j in &movers {
                if self.agvs[j].spec.footprint != fp && !group.contains(&j) {
                    table.push(agent_timeline(&self.agvs[j], now).with_until(now + 2));
                }
            }
            let out = plan_prioritized_ordered(&order, &env, &table, now);
            expansions += out.expansions;
            searched |= out.searches > 0;
            for &i in &group {
                let id = self.agvs[i].id();
                let path = out.paths[&id].clone();
                let failed = out.failed.contains(&id);
                self.dodge_fails[i] = if failed { self.dodge_fails[i] + 1 } else { 0 };
                reserved.push(Timeline::from_path(&path, fp));
                self.agvs[i].plan = if path.actions.is_empty() {
                    None
                } else {
                    Some(ActivePlan::new(path, failed))
                };
            }
        }
        (expansions, searched)
    }

    // Phase 5.
    fn execute_phase(&mut self, now: u32) {
        let cfg = self.config.clone();
        let ctx = ExecContext {
            terrain: &self.terrain,
            corridors: &self.corridors,
            margin: cfg.margin,
            resolution: cfg.resolution,
        };
        let report = step_execute(&mut self.agvs, &ctx, now);
        for id in &report.held {
            self.stats.holds += 1;
            self.log.push(now, EventKind::Hold, json!({"agv": id}));
        }
        for c in &report.collisions {
            self.stats.collisions += 1;
            self.log
                .push(now, EventKind::Collision, serde_json::to_value(c).expect("serialize"));
        }
        for (id, reason) in &report.triggers {
            let i = self.agv_index(*id).unwrap();
            if self.agvs[i].task.is_none() {
                continue;
            }
            self.log
                .push(now, EventKind::Trigger, json!({"agv": id, "reason": reason}));
            let e = self.triggers.entry(*id).or_insert(*reason);
            *e = (*e).max(*reason);
        }
        for a in &self.agvs {
            if !a.is_active() {
                continue;
            }
            let occ = a.occupancy();
            for cor in &self.corridors {
                if cor.is_active(now + 1) {
                    if let Some(c) = cor.intrusion(a.id(), &occ) {
                        self.stats.intrusions += 1;
                        self.log.push(
                            now + 1,
                            EventKind::Intrusion,
                            json!({"agv": a.id(), "corridor": cor.id, "cell": [c.x, c.y]}),
                        );
                    }
                }
            }
        }
        for (i, a) in self.agvs.iter().enumerate() {
            if let Some((_, pose)) = self.down_pose[i] {
                if a.pose != pose || a.in_flight.is_some() {
                    self.stats.failed_moves += 1;
                }
            }
        }
    }

    // Phase 6.
    fn stage_phase(&mut self, now: u32) {
        let next = now + 1;
        let config = self.config.clone();
        let layout = &config.layout;
        for i in 0..self.agvs.len() {
            let Some(tid) = self.agvs[i].task else { continue };
            let agv = &mut self.agvs[i];
            let task = &mut self.tasks[tid.0 as usize];
            if !task.stage.is_travel() && agv.is_active() {
                task.stage_elapsed += 1;
            }
            if task.stage.is_travel() && agv.plan.is_some() {
                continue;
            }
            if task.stage == TaskStage::CarryToStation && self.claims.get(&task.station) != Some(&agv.id()) {
                continue;
            }
            if !stage_complete(task, agv, layout) {
                continue;
            }
            let order = &mut self.orders[task.order.0 as usize];
            let mut ctx = StageContext {
                layout,
                terrain: &mut self.terrain,
                inventory: &mut self.inventory,
                order,
            };
            let before = task.stage;
            match advance_stage(task, agv, &mut ctx, next) {
                Ok(stage) => {
                    if stage <= before {
                        self.stats.stage_violations += 1;
                    }
                    self.log.push(
                        next,
                        EventKind::Stage,
                        json!({"task": task.id, "agv": agv.id(), "stage": stage.as_str()}),
                    );
                    if before == TaskStage::WaitService {
                        self.log.push(
                            next,
                            EventKind::Completion,
                            json!({"order": task.order, "task": task.id, "agv": agv.id()}),
                        );
                    }
                    self.triggers.remove(&agv.id());
                }
                Err(_) => self.stats.stage_violations += 1,
            }
        }
        let mut release = Vec::new();
        for (station, agv) in &self.claims {
            let i = self.agv_index(*agv).unwrap();
            let a = &self.agvs[i];
            let holding = self.task_of(i).is_some_and(|t| {
                t.station == *station && matches!(t.stage, TaskStage::CarryToStation | TaskStage::WaitService)
            });
            let st = layout.station(*station).unwrap();
            let dock = Rect::footprint(layout.station_anchor(st, a.spec.footprint), a.spec.footprint);
            if !holding && !a.occupancy().intersects(&dock) {
                release.push(*station);
            }
        }
        for s in release {
            self.claims.remove(&s);
        }
    }

    // Phase 7.
    fn record_phase(&mut self, _now: u32) {
        let completed_qty: u64 = self
            .orders
            .iter()
            .filter(|o| o.status == OrderStatus::Completed)
            .map(|o| o.quantity as u64)
            .sum();
        if self.inventory.total() + completed_qty != self.initial_inventory {
            self.stats.conservation_violations += 1;
        }
        let counts = self.status_counts();
        if counts.iter().sum::<usize>() != self.orders.len() {
            self.stats.conservation_violations += 1;
        }
        let assigned = self.orders.iter().filter(|o| o.status == OrderStatus::Assigned).count();
        let open_tasks = self
            .tasks
            .iter()
            .filter(|t| t.assigned_agv.is_some() && self.orders[t.order.0 as usize].status == OrderStatus::Assigned)
            .count();
        if assigned != open_tasks {
            self.stats.conservation_violations += 1;
        }
    }

    /// Orders per status: pending (including unreleased), assigned, completed, expired.
    pub fn status_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for o in &self.orders {
            let k = match o.status {
                OrderStatus::Pending => 0,
                OrderStatus::Assigned => 1,
                OrderStatus::Completed => 2,
                OrderStatus::Expired => 3,
            };
            c[k] += 1;
        }
        c
    }

    pub fn initial_inventory(&self) -> u64 {
        self.initial_inventory
    }
}
