//! Brute-force oracles shared by the planner tests and the acceptance run.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rmfs_core::planner::{
    default_horizon, plan_cbs, plan_prioritized, Blocked, PlanEnv, PlanOutcome, PlanRequest, ReservationTable,
};
use rmfs_core::world::Terrain;
use rmfs_core::{AgvSpec, Cell, Heading, Layout, Pose, TimedPath};

pub type P = (i32, i32);

pub const MOVES: [P; 5] = [(0, 0), (0, -1), (1, 0), (0, 1), (-1, 0)];

pub struct Grid {
    pub w: i32,
    pub h: i32,
    pub blocked: BTreeSet<P>,
}

impl Grid {
    pub fn free(&self, p: P) -> bool {
        p.0 >= 0 && p.1 >= 0 && p.0 < self.w && p.1 < self.h && !self.blocked.contains(&p)
    }

    pub fn layout(&self) -> Layout {
        let mut l = Layout::empty(self.w, self.h);
        l.obstacles = self.blocked.iter().map(|&(x, y)| Cell::new(x, y)).collect();
        l
    }
}

pub fn bfs_dist(g: &Grid, s: P, t: P) -> Option<u32> {
    let mut seen = BTreeSet::from([s]);
    let mut q = VecDeque::from([(s, 0)]);
    while let Some((p, d)) = q.pop_front() {
        if p == t {
            return Some(d);
        }
        for m in &MOVES[1..] {
            let n = (p.0 + m.0, p.1 + m.1);
            if g.free(n) && seen.insert(n) {
                q.push_back((n, d + 1));
            }
        }
    }
    None
}

/// Swept cells of a unit agent over one step.
pub fn swept(a: P, b: P) -> [P; 2] {
    [a, b]
}

/// Two unit agents may not share a cell, and while either moves the cells
/// they sweep may not overlap unless both make the identical move.
pub fn step_conflict(a0: P, a1: P, b0: P, b1: P) -> bool {
    if a1 == b1 || a0 == b0 {
        return true;
    }
    let (da, db) = ((a1.0 - a0.0, a1.1 - a0.1), (b1.0 - b0.0, b1.1 - b0.1));
    let moving = da != (0, 0) || db != (0, 0);
    if !moving || (da == db) {
        return false;
    }
    swept(a0, a1).iter().any(|c| swept(b0, b1).contains(c))
}

/// Optimal sum of costs for two agents by Dijkstra over joint states.
/// An agent's cost ends once it settles on its goal for good; settling is an
/// explicit zero-cost transition.
pub fn joint_soc(g: &Grid, starts: [P; 2], goals: [P; 2]) -> Option<u32> {
    type S = (P, P, bool, bool);
    let start: S = (starts[0], starts[1], false, false);
    let mut best: HashMap<S, u32> = HashMap::from([(start, 0)]);
    let mut heap = BinaryHeap::from([Reverse((0u32, start))]);
    while let Some(Reverse((d, s))) = heap.pop() {
        if best.get(&s).is_some_and(|&b| b < d) {
            continue;
        }
        let (a, b, fa, fb) = s;
        if fa && fb {
            return Some(d);
        }
        let mut push = |n: S, cost: u32| {
            let nd = d + cost;
            if best.get(&n).is_none_or(|&o| nd < o) {
                best.insert(n, nd);
                heap.push(Reverse((nd, n)));
            }
        };
        if !fa && a == goals[0] {
            push((a, b, true, fb), 0);
        }
        if !fb && b == goals[1] {
            push((a, b, fa, true), 0);
        }
        let ma: &[P] = if fa { &MOVES[..1] } else { &MOVES };
        let mb: &[P] = if fb { &MOVES[..1] } else { &MOVES };
        for m in ma {
            let a1 = (a.0 + m.0, a.1 + m.1);
            if !g.free(a1) {
                continue;
            }
            for n in mb {
                let b1 = (b.0 + n.0, b.1 + n.1);
                if !g.free(b1) || step_conflict(a, a1, b, b1) {
                    continue;
                }
                push((a1, b1, fa, fb), u32::from(!fa) + u32::from(!fb));
            }
        }
    }
    None
}

pub fn position(p: &TimedPath, t: u32) -> P {
    let s = p.states.iter().rev().find(|s| s.step <= t).unwrap_or(&p.states[0]);
    // A multi-step action keeps the agent on its source cell until it lands.
    (s.cell.x, s.cell.y)
}

/// Pairwise conflict check of finished unit-agent paths.
pub fn conflict_free(paths: &[&TimedPath]) -> bool {
    let end = paths.iter().map(|p| p.arrival_step()).max().unwrap_or(0) + 1;
    let start = paths.iter().map(|p| p.start_step()).min().unwrap_or(0);
    for t in start..end {
        for i in 0..paths.len() {
            for j in i + 1..paths.len() {
                let (a0, a1) = (position(paths[i], t), position(paths[i], t + 1));
                let (b0, b1) = (position(paths[j], t), position(paths[j], t + 1));
                if step_conflict(a0, a1, b0, b1) {
                    return false;
                }
            }
        }
    }
    true
}

pub fn random_grid(rng: &mut ChaCha8Rng, max: i32) -> Grid {
    let w = rng.random_range(2..=max);
    let h = rng.random_range(2..=max);
    let mut blocked = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(0.15) {
                blocked.insert((x, y));
            }
        }
    }
    Grid { w, h, blocked }
}

pub fn random_free(rng: &mut ChaCha8Rng, g: &Grid, taken: &[P]) -> Option<P> {
    let free: Vec<P> = (0..g.h)
        .flat_map(|y| (0..g.w).map(move |x| (x, y)))
        .filter(|p| g.free(*p) && !taken.contains(p))
        .collect();
    (!free.is_empty()).then(|| free[rng.random_range(0..free.len())])
}

pub fn requests(starts: &[P], goals: &[P]) -> Vec<PlanRequest> {
    starts
        .iter()
        .zip(goals)
        .enumerate()
        .map(|(i, (s, g))| {
            PlanRequest::new(
                AgvSpec::unit(i as u32),
                Pose::new(Cell::new(s.0, s.1), Heading::N),
                Cell::new(g.0, g.1),
            )
        })
        .collect()
}

pub fn plan(g: &Grid, starts: &[P], goals: &[P], cbs: bool) -> PlanOutcome {
    let layout = g.layout();
    let terrain = Terrain::new(&layout);
    let blocked = Blocked::none(g.w, g.h);
    let env = PlanEnv {
        terrain: &terrain,
        blocked: &blocked,
        rest: None,
        horizon: default_horizon(g.w, g.h, 1),
    };
    let reqs = requests(starts, goals);
    if cbs {
        plan_cbs(&reqs, &env, &ReservationTable::new(), 0, 100_000)
    } else {
        plan_prioritized(&reqs, &env, &ReservationTable::new(), 0)
    }
}

/// Solve random solvable 2-agent instances on grids up to 5×5 with CBS and
/// compare against the joint search. Returns (instances, SOC mismatches,
/// conflicting outputs).
pub fn cbs_vs_joint_search(seed: u64, instances: usize) -> (usize, usize, usize) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut wrong, mut conflicting) = (0, 0, 0);
    let mut attempts = 0;
    while checked < instances && attempts < 100 * instances {
        attempts += 1;
        let g = random_grid(&mut rng, 5);
        let Some(s0) = random_free(&mut rng, &g, &[]) else {
            continue;
        };
        let Some(s1) = random_free(&mut rng, &g, &[s0]) else {
            continue;
        };
        let Some(g0) = random_free(&mut rng, &g, &[s1]) else {
            continue;
        };
        let Some(g1) = random_free(&mut rng, &g, &[s0, g0]) else {
            continue;
        };
        let Some(opt) = joint_soc(&g, [s0, s1], [g0, g1]) else {
            continue;
        };
        let out = plan(&g, &[s0, s1], &[g0, g1], true);
        let paths: Vec<&TimedPath> = out.paths.values().collect();
        if out.sum_of_costs() != opt || !out.failed.is_empty() {
            wrong += 1;
        }
        if !conflict_free(&paths) {
            conflicting += 1;
        }
        checked += 1;
    }
    (checked, wrong, conflicting)
}
