//! Acceptance run: one PASS/FAIL line per headline criterion.
//!
//! Every simulation here is stepped under an independent monitor that checks
//! conservation, failed-AGV immobility, corridor intrusions and physical
//! overlap after every step, without trusting the engine's own counters.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rmfs_core::engine::{run, to_jsonl, write_results_csv, ResultRow};
use rmfs_core::executor::StaticScene;
use rmfs_core::planner::{
    default_horizon, detect_conflicts, plan_cbs, plan_prioritized, Blocked, PlanEnv, PlanRequest, ReservationTable,
};
use rmfs_core::world::{Health, ShelfPod, Terrain};
use rmfs_core::{
    check_continuous_collisions, realize_plan, AgvId, AgvSpec, Cell, EngineConfig, Heading, Layout, Metrics,
    OrderStatus, PlannerChoice, Pose, Rect, SafetyMargin, Scenario, SchedulerPolicy, ShelfId, SimState,
};

const SEEDS: u64 = 100;
const DOWN_STEPS: u32 = 40;

/// Violations seen by the per-step monitor, summed over every run.
#[derive(Default)]
struct Monitor {
    runs: u32,
    steps: u64,
    inventory: u32,
    status_regressions: u32,
    assignment_mismatch: u32,
    failed_moved: u32,
    /// Completed down periods by length.
    down_lengths: BTreeMap<u32, u32>,
    /// Down periods still running when the run ended.
    truncated_downs: u32,
    intrusions: u32,
    overlaps: u32,
}

impl Monitor {
    fn conservation_ok(&self) -> bool {
        self.inventory == 0 && self.status_regressions == 0 && self.assignment_mismatch == 0
    }
}

fn status_rank(s: OrderStatus) -> u8 {
    match s {
        OrderStatus::Pending => 0,
        OrderStatus::Assigned => 1,
        OrderStatus::Completed | OrderStatus::Expired => 2,
    }
}

fn layout_stock(l: &Layout) -> u64 {
    l.shelves
        .iter()
        .flat_map(|s| s.contents.values())
        .map(|&q| q as u64)
        .sum()
}

/// Step a run to completion under the monitor.
fn run_checked(config: &Arc<EngineConfig>, seed: u64, mon: &mut Monitor) -> Metrics {
    let mut sim = SimState::new(config.clone(), seed).expect("valid config");
    let stock = layout_stock(&config.layout);
    let n = sim.agvs.len();
    let mut prev_status: Vec<OrderStatus> = sim.orders.iter().map(|o| o.status).collect();
    // (pose when it went down, steps observed down) per AGV.
    let mut down: Vec<Option<(Pose, u32)>> = vec![None; n];
    mon.runs += 1;
    while sim.step() {
        mon.steps += 1;

        let completed: u64 = sim
            .orders
            .iter()
            .filter(|o| o.status == OrderStatus::Completed)
            .map(|o| o.quantity as u64)
            .sum();
        if sim.inventory.total() + completed != stock {
            mon.inventory += 1;
        }
        for (o, prev) in sim.orders.iter().zip(prev_status.iter_mut()) {
            let back = status_rank(o.status) < status_rank(*prev);
            let flipped = status_rank(*prev) == 2 && o.status != *prev;
            if back || flipped || (o.status == OrderStatus::Completed) != o.completed_step.is_some() {
                mon.status_regressions += 1;
            }
            *prev = o.status;
        }
        // Every assigned order is worked by exactly one AGV-held task.
        let mut holders: BTreeMap<u32, u32> = BTreeMap::new();
        for t in &sim.tasks {
            if t.assigned_agv.is_some() && sim.orders[t.order.0 as usize].status == OrderStatus::Assigned {
                *holders.entry(t.order.0).or_default() += 1;
            }
        }
        for o in &sim.orders {
            let h = holders.get(&o.id.0).copied().unwrap_or(0);
            if (o.status == OrderStatus::Assigned) != (h == 1) || h > 1 {
                mon.assignment_mismatch += 1;
            }
        }

        for (i, a) in sim.agvs.iter().enumerate() {
            match (a.health, &mut down[i]) {
                (Health::Failed { .. }, Some((pose, count))) => {
                    if a.pose != *pose || a.in_flight.is_some() {
                        mon.failed_moved += 1;
                    }
                    *count += 1;
                }
                (Health::Failed { .. }, slot @ None) => {
                    if a.in_flight.is_some() {
                        mon.failed_moved += 1;
                    }
                    *slot = Some((a.pose, 1));
                }
                (Health::Active, slot @ Some(_)) => {
                    let (_, count) = slot.take().unwrap();
                    *mon.down_lengths.entry(count).or_default() += 1;
                }
                (Health::Active, None) => {}
            }
        }

        // Corridors guard their cells for the steps they are active; the
        // failed AGV and AGVs caught inside when it appeared are exempt.
        for cor in &sim.corridors {
            if !(cor.active_from <= sim.clock && sim.clock < cor.active_until) {
                continue;
            }
            for a in &sim.agvs {
                if a.id() == cor.cause_agv {
                    continue;
                }
                let exempt: &[Cell] = cor.exempt.iter().find(|(x, _)| *x == a.id()).map_or(&[], |(_, c)| c);
                if a.occupancy()
                    .cells()
                    .any(|c| cor.cells.contains(&c) && !exempt.contains(&c))
                {
                    mon.intrusions += 1;
                }
            }
        }

        // Bodies at their interpolated positions never share area.
        let snap = sim.snapshot();
        for (i, a) in snap.agvs.iter().enumerate() {
            for b in &snap.agvs[i + 1..] {
                let (sa, sb) = (a.footprint as f64, b.footprint as f64);
                let ox = (a.x + sa).min(b.x + sb) - a.x.max(b.x);
                let oy = (a.y + sa).min(b.y + sb) - a.y.max(b.y);
                if ox > 1e-9 && oy > 1e-9 {
                    mon.overlaps += 1;
                }
            }
        }
    }
    mon.truncated_downs += down.iter().filter(|d| d.is_some()).count() as u32;
    sim.metrics()
}

fn config(scenario: Scenario, scheduler: SchedulerPolicy, planner: PlannerChoice) -> Arc<EngineConfig> {
    let mut c = EngineConfig::scenario(scenario);
    c.scheduler = scheduler;
    c.planner = planner;
    c.deterministic_ct = true;
    c.record_events = false;
    Arc::new(c)
}

fn sweep(scenario: Scenario, scheduler: SchedulerPolicy, planner: PlannerChoice, mon: &mut Monitor) -> Vec<Metrics> {
    let c = config(scenario, scheduler, planner);
    let t = Instant::now();
    let out: Vec<Metrics> = (0..SEEDS).map(|s| run_checked(&c, s, mon)).collect();
    eprintln!(
        "  {} {}+{}: {} seeds in {:.1}s",
        c.env_label,
        c.scheduler.as_str(),
        c.planner.label(),
        SEEDS,
        t.elapsed().as_secs_f64()
    );
    out
}

fn mean_sr(ms: &[Metrics]) -> f64 {
    ms.iter().map(|m| m.sr).sum::<f64>() / ms.len() as f64
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips.
fn sign_test(wins: u32, losses: u32) -> f64 {
    let n = wins + losses;
    let mut coef = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += coef;
        }
        coef = coef * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

fn paired(a: &[Metrics], b: &[Metrics], key: impl Fn(&Metrics) -> f64) -> (u32, u32) {
    let mut wins = 0;
    let mut losses = 0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (key(x), key(y));
        if x > y {
            wins += 1;
        } else if x < y {
            losses += 1;
        }
    }
    (wins, losses)
}

fn random_anchor(rng: &mut ChaCha8Rng, terrain: &Terrain, fp: u8, carrying: bool, taken: &[Rect]) -> Option<Cell> {
    let mut options = Vec::new();
    for y in 0..terrain.height {
        for x in 0..terrain.width {
            let c = Cell::new(x, y);
            let r = Rect::footprint(c, fp);
            if r.within(terrain.width, terrain.height)
                && terrain.anchor_ok(c, fp, carrying)
                && !taken.iter().any(|t| t.intersects(&r))
            {
                options.push(c);
            }
        }
    }
    if options.is_empty() {
        None
    } else {
        Some(options[rng.random_range(0..options.len())])
    }
}

struct BridgeStats {
    attempts: u32,
    accepted: u32,
    events: usize,
    mixed: u32,
}

/// Random mixed-fleet instances: planned, accepted when conflict-free, then
/// replayed in continuous time.
fn bridge(target: u32) -> BridgeStats {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut st = BridgeStats {
        attempts: 0,
        accepted: 0,
        events: 0,
        mixed: 0,
    };
    while st.accepted < target && st.attempts < 40 * target {
        st.attempts += 1;
        let w = rng.random_range(6..=10);
        let h = rng.random_range(6..=10);
        let mut layout = Layout::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                let roll: f64 = rng.random();
                if roll < 0.06 {
                    layout.obstacles.insert(Cell::new(x, y));
                } else if roll < 0.16 {
                    let id = layout.shelves.len() as u32;
                    layout.shelves.push(ShelfPod {
                        id: ShelfId(id),
                        home: Cell::new(x, y),
                        size: 1,
                        contents: BTreeMap::new(),
                    });
                }
            }
        }
        let terrain = Terrain::new(&layout);
        let agents = rng.random_range(2..=4u32);
        let mut reqs = Vec::new();
        let (mut starts, mut goals) = (Vec::new(), Vec::new());
        for id in 0..agents {
            let spec = AgvSpec {
                id: AgvId(id),
                footprint: if rng.random_bool(0.35) { 2 } else { 1 },
                steps_per_cell: rng.random_range(1..=2),
                kind: "mixed".into(),
                turn_cost: rng.random_range(0..=1),
            };
            let carrying = rng.random_bool(0.3);
            let Some(s) = random_anchor(&mut rng, &terrain, spec.footprint, carrying, &starts) else {
                break;
            };
            let Some(g) = random_anchor(&mut rng, &terrain, spec.footprint, carrying, &goals) else {
                break;
            };
            starts.push(Rect::footprint(s, spec.footprint));
            goals.push(Rect::footprint(g, spec.footprint));
            let heading = Heading::ALL[rng.random_range(0..4)];
            let mut r = PlanRequest::new(spec, Pose::new(s, heading), g);
            r.carrying = carrying;
            reqs.push(r);
        }
        if reqs.len() < 2 {
            continue;
        }
        let blocked = Blocked::none(w, h);
        let env = PlanEnv {
            terrain: &terrain,
            blocked: &blocked,
            rest: None,
            horizon: default_horizon(w, h, 2),
        };
        let out = if st.attempts.is_multiple_of(2) {
            plan_cbs(&reqs, &env, &ReservationTable::new(), 0, 2_000)
        } else {
            plan_prioritized(&reqs, &env, &ReservationTable::new(), 0)
        };
        let fps: BTreeMap<AgvId, u8> = reqs.iter().map(|r| (r.id(), r.spec.footprint)).collect();
        let paths: Vec<_> = out.paths.values().cloned().collect();
        if !out.failed.is_empty() || detect_conflicts(&paths, &fps, &[]).is_some() {
            continue;
        }
        st.accepted += 1;
        if reqs.iter().any(|r| r.spec.footprint == 2) && reqs.iter().any(|r| r.spec.footprint == 1) {
            st.mixed += 1;
        }
        let trajs: Vec<_> = reqs
            .iter()
            .map(|r| realize_plan(&out.paths[&r.id()], &r.spec).expect("planned paths realize"))
            .collect();
        let scene = StaticScene {
            obstacles: layout.obstacles.clone(),
            shelves: layout.shelves.iter().map(|s| s.home).collect(),
            carrying: reqs
                .iter()
                .filter(|r| r.carrying)
                .map(|r| r.id())
                .collect::<BTreeSet<_>>(),
        };
        st.events += check_continuous_collisions(&trajs, &fps, SafetyMargin::ZERO, &scene, &[], 10).len();
    }
    st
}

/// Results row and event log of one run, as bytes.
fn fingerprint(c: &EngineConfig, seed: u64) -> (Vec<u8>, String) {
    let r = run(c, seed).expect("run");
    let mut csv = Vec::new();
    write_results_csv(&mut csv, &[ResultRow::new(c, seed, &r.metrics)], false).unwrap();
    (csv, to_jsonl(&r.events))
}

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results = Vec::new();
    let mut mon = Monitor::default();
    let (ta, rd) = (SchedulerPolicy::Ta, SchedulerPolicy::Rd);
    let (astar, cbs) = (PlannerChoice::AStar, PlannerChoice::Cbs);

    eprintln!("homogeneous sweeps");
    let ho_ta_a = sweep(Scenario::Homogeneous, ta, astar.clone(), &mut mon);
    let ho_ta_c = sweep(Scenario::Homogeneous, ta, cbs.clone(), &mut mon);
    let ho_rd_a = sweep(Scenario::Homogeneous, rd, astar.clone(), &mut mon);
    let ho_rd_c = sweep(Scenario::Homogeneous, rd, cbs.clone(), &mut mon);
    let srs = [
        mean_sr(&ho_ta_a),
        mean_sr(&ho_ta_c),
        mean_sr(&ho_rd_a),
        mean_sr(&ho_rd_c),
    ];
    results.push(Outcome {
        name: "homogeneous success rate",
        pass: srs[0] == 100.0 && srs[1] == 100.0 && srs[2] >= 99.5 && srs[3] >= 99.5,
        detail: format!(
            "TA+A* {:.2}, TA+CBS {:.2}, RD+A* {:.2}, RD+CBS {:.2}",
            srs[0], srs[1], srs[2], srs[3]
        ),
    });

    let tp = |m: &Metrics| m.tp;
    let mean_tp = |ms: &[Metrics]| ms.iter().map(|m| m.tp).sum::<f64>() / ms.len() as f64;
    let (wa, la) = paired(&ho_ta_a, &ho_rd_a, tp);
    let (wc, lc) = paired(&ho_ta_c, &ho_rd_c, tp);
    let (pa, pc) = (sign_test(wa, la), sign_test(wc, lc));
    results.push(Outcome {
        name: "scheduler ordering",
        pass: mean_tp(&ho_ta_a) > mean_tp(&ho_rd_a) && mean_tp(&ho_ta_c) > mean_tp(&ho_rd_c) && pa < 0.01 && pc < 0.01,
        detail: format!(
            "A*: TP {:.4} vs {:.4}, {wa}/{la} p={pa:.2e}; CBS: TP {:.4} vs {:.4}, {wc}/{lc} p={pc:.2e}",
            mean_tp(&ho_ta_a),
            mean_tp(&ho_rd_a),
            mean_tp(&ho_ta_c),
            mean_tp(&ho_rd_c)
        ),
    });

    eprintln!("heterogeneous sweeps");
    let he_a = mean_sr(&sweep(Scenario::Heterogeneous, ta, astar.clone(), &mut mon));
    let he_c = mean_sr(&sweep(Scenario::Heterogeneous, ta, cbs.clone(), &mut mon));
    results.push(Outcome {
        name: "heterogeneous success rate",
        pass: he_a == 100.0 && (97.0..=100.0).contains(&he_c),
        detail: format!("TA+A* {he_a:.2}, TA+CBS {he_c:.2}"),
    });

    eprintln!("fault-tolerant sweeps");
    let ft = EngineConfig::scenario(Scenario::Fault).failures;
    let before = (mon.failed_moved, mon.intrusions, mon.down_lengths.clone());
    assert!(
        before.0 == 0 && before.1 == 0 && before.2.is_empty(),
        "no failures outside the fault scenario"
    );
    let ft_a = sweep(Scenario::Fault, ta, astar, &mut mon);
    let ft_c = sweep(Scenario::Fault, ta, cbs, &mut mon);
    let (fa, fc) = (mean_sr(&ft_a), mean_sr(&ft_c));
    let downs: u32 = mon.down_lengths.values().sum();
    let exact = mon.down_lengths.get(&DOWN_STEPS).copied().unwrap_or(0);
    results.push(Outcome {
        name: "fault-tolerant robustness",
        pass: ft.per_step_probability == 0.01
            && ft.down_steps == DOWN_STEPS
            && fa >= 99.0
            && fc >= 99.0
            && downs > 0
            && exact == downs
            && mon.failed_moved == 0
            && mon.intrusions == 0,
        detail: format!(
            "SR A* {fa:.2}, CBS {fc:.2}; {downs} recovered failures, {exact} down exactly {DOWN_STEPS} steps, \
             {} cut off by run end; {} moves while down; {} intrusions",
            mon.truncated_downs, mon.failed_moved, mon.intrusions
        ),
    });

    let (w, l) = paired(&ft_c, &ft_a, |m| m.ct);
    results.push(Outcome {
        name: "planning cost ordering",
        pass: w >= 90,
        detail: format!("CBS above A* in {w}/{SEEDS} seeds (below in {l})"),
    });

    let (n, wrong, conflicting) = common::cbs_vs_joint_search(2025, 60);
    results.push(Outcome {
        name: "CBS optimality",
        pass: n >= 50 && wrong == 0 && conflicting == 0,
        detail: format!("{n} instances, {wrong} sum-of-costs mismatches, {conflicting} conflicting outputs"),
    });

    let b = bridge(120);
    results.push(Outcome {
        name: "discrete-continuous bridge",
        pass: b.accepted >= 100 && b.events == 0,
        detail: format!(
            "{} accepted plan sets ({} mixed-footprint) from {} attempts, {} continuous events",
            b.accepted, b.mixed, b.attempts, b.events
        ),
    });

    let mut det_runs = 0;
    let mut det_diff = 0;
    for (scenario, planner, seed) in [
        (Scenario::Homogeneous, PlannerChoice::Cbs, 11),
        (Scenario::Heterogeneous, PlannerChoice::AStar, 12),
        (Scenario::Fault, PlannerChoice::Cbs, 13),
        (Scenario::Fault, PlannerChoice::AStar, 14),
    ] {
        let mut c = EngineConfig::scenario(scenario);
        c.planner = planner;
        c.deterministic_ct = true;
        c.record_events = true;
        det_runs += 1;
        if fingerprint(&c, seed) != fingerprint(&c, seed) {
            det_diff += 1;
        }
    }
    results.push(Outcome {
        name: "determinism",
        pass: det_diff == 0,
        detail: format!("{det_runs} configs run twice, {det_diff} differ"),
    });

    results.push(Outcome {
        name: "conservation",
        pass: mon.conservation_ok() && mon.overlaps == 0,
        detail: format!(
            "{} runs, {} steps: {} inventory, {} status, {} assignment violations; {} body overlaps",
            mon.runs, mon.steps, mon.inventory, mon.status_regressions, mon.assignment_mismatch, mon.overlaps
        ),
    });

    let mut ok = true;
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.pass;
    }
    println!(
        "{}/{} criteria passed in {:.0}s",
        results.iter().filter(|r| r.pass).count(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
