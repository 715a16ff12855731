//! Space-time A* over (anchor, heading, step).

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};

use crate::geom::{Cell, Heading, Pose, Rect};

use super::{Action, Constraint, Goal, Motion, PathState, PlanEnv, PlanRequest, ReservationTable, TimedPath, Turn};

/// Inputs of one single-agent search.
pub struct SearchSpec<'a> {
    pub req: &'a PlanRequest,
    pub start_step: u32,
    /// Constraints on this agent (other agents' entries are ignored).
    pub constraints: &'a [Constraint],
}

#[derive(Clone, Debug, Default)]
pub struct SearchOutcome {
    pub path: Option<TimedPath>,
    pub expansions: u64,
}

struct Node {
    cell: Cell,
    heading: Heading,
    t: u32,
    parent: u32,
    action: Action,
}

type Key = (u32, u16, u8, i32, i32, u8, u32);

const DENSE_LIMIT: usize = 1 << 24;

thread_local! {
    static SCRATCH: RefCell<(Vec<u32>, u32)> = const { RefCell::new((Vec::new(), 0)) };
}

enum Visited {
    Dense { len: usize },
    Sparse(HashSet<usize>),
}

/// Minimum-arrival-step path for one agent. Ties among equal estimates
/// prefer fewer rotations, then Move < Rotate < Wait, then coordinates.
pub fn search(spec: &SearchSpec<'_>, env: &PlanEnv<'_>, others: &ReservationTable) -> SearchOutcome {
    let req = spec.req;
    let me = req.id();
    let fp = req.spec.footprint;
    let spc = req.spec.steps_per_cell.max(1);
    let turn = req.spec.turn_cost;
    let terrain = env.terrain;
    let start = spec.start_step;
    let mut out = SearchOutcome::default();

    let constraints: Vec<Constraint> = spec.constraints.iter().copied().filter(|c| c.agv() == me).collect();
    let exempt = |c: Cell| req.exempt.contains(&c);
    let blocked_at = |r: &Rect, t: u32| r.cells().any(|c| env.blocked.is_blocked(c, t) && !exempt(c));

    // Step from which the agent may stay at `anchor` forever.
    let ready_at = |anchor: Cell| -> Option<u32> {
        let rect = Rect::footprint(anchor, fp);
        let mut ready = others.free_from(me, &rect)?;
        for c in rect.cells() {
            if !exempt(c) {
                let u = env.blocked.blocked_until(c);
                if u == u32::MAX {
                    return None;
                }
                ready = ready.max(u);
            }
        }
        for con in &constraints {
            match *con {
                Constraint::Vertex { cell, step, .. } if rect.contains(cell) => ready = ready.max(step + 1),
                Constraint::Edge {
                    step,
                    from,
                    to,
                    motion: None,
                    ..
                } if from == rect && to == rect => ready = ready.max(step + 1),
                _ => {}
            }
        }
        Some(ready)
    };

    let (goal_cell, mut limit) = match req.goal {
        Goal::Cell(g) => {
            if !terrain.anchor_ok(g, fp, req.carrying) || !reachable(env, req, g) {
                return out;
            }
            let Some(ready) = ready_at(g) else {
                return out;
            };
            (Some(g), env.horizon + ready.saturating_sub(start))
        }
        Goal::Rest => {
            if env.rest.is_none() {
                return out;
            }
            (None, env.horizon)
        }
    };
    limit = limit.max(1);
    let mut rest_ready: HashMap<usize, Option<u32>> = HashMap::new();
    let h = |c: Cell| -> u32 {
        match goal_cell {
            Some(g) => c.manhattan(g) * spc,
            None => 0,
        }
    };

    let headings = if turn > 0 { 4 } else { 1 };
    let ncells = terrain.cell_count();
    let size = (limit as usize + 1) * headings * ncells;
    let mut visited = if size <= DENSE_LIMIT {
        Visited::Dense { len: size }
    } else {
        Visited::Sparse(HashSet::new())
    };
    let stamp = SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        if let Visited::Dense { len } = visited {
            if s.0.len() < len {
                s.0.resize(len, 0);
            }
        }
        s.1 = s.1.wrapping_add(1);
        if s.1 == 0 {
            s.0.iter_mut().for_each(|v| *v = 0);
            s.1 = 1;
        }
        s.1
    });
    let key_of = |c: Cell, hd: Heading, t: u32| -> usize {
        let hi = if headings == 4 { hd.index() } else { 0 };
        (((t - start) as usize * headings) + hi) * ncells + terrain.idx(c)
    };
    // Returns true if the state was not yet closed, closing it.
    let mut close = |k: usize| -> bool {
        match &mut visited {
            Visited::Dense { .. } => SCRATCH.with(|s| {
                let mut s = s.borrow_mut();
                if s.0[k] == stamp {
                    false
                } else {
                    s.0[k] = stamp;
                    true
                }
            }),
            Visited::Sparse(set) => set.insert(k),
        }
    };

    let mut nodes: Vec<Node> = Vec::new();
    let mut open: BinaryHeap<Reverse<(Key, u32)>> = BinaryHeap::new();
    let mut rot_count: Vec<u16> = Vec::new();
    let key = |c: Cell, hd: Heading, t: u32, rot: u16, rank: u8, seq: u32| -> Key {
        (t - start + h(c), rot, rank, c.y, c.x, hd.index() as u8, seq)
    };
    nodes.push(Node {
        cell: req.start.cell,
        heading: req.start.heading,
        t: start,
        parent: u32::MAX,
        action: Action::Wait,
    });
    rot_count.push(0);
    open.push(Reverse((key(req.start.cell, req.start.heading, start, 0, 0, 0), 0)));

    // Checks every unit window of an action spanning `dur` steps from `t`.
    let window_ok = |t: u32, dur: u32, src: Rect, dst: Rect, motion: Option<Motion>| -> bool {
        let both = src.union(&dst);
        for j in 0..dur {
            let from = if j == 0 { src } else { both };
            let to = if j + 1 == dur { dst } else { both };
            let w = t + j;
            if blocked_at(&to, w + 1) {
                return false;
            }
            if constraints.iter().any(|c| c.forbids(w, from, to, motion)) {
                return false;
            }
            if others.blocks(me, w, from, to, motion) {
                return false;
            }
        }
        true
    };

    let mut found: Option<u32> = None;
    while let Some(Reverse((_, idx))) = open.pop() {
        let (cell, heading, t) = {
            let n = &nodes[idx as usize];
            (n.cell, n.heading, n.t)
        };
        if !close(key_of(cell, heading, t)) {
            continue;
        }
        out.expansions += 1;
        let at_goal = match goal_cell {
            Some(g) => cell == g && ready_at(g).is_some_and(|r| t >= r),
            None => {
                let i = terrain.idx(cell);
                env.rest.unwrap()[i] && {
                    let r = *rest_ready.entry(i).or_insert_with(|| ready_at(cell));
                    r.is_some_and(|r| t >= r)
                }
            }
        };
        if at_goal {
            found = Some(idx);
            break;
        }
        let rot = rot_count[idx as usize];
        let src = Rect::footprint(cell, fp);
        let mut push = |nodes: &mut Vec<Node>, rot_count: &mut Vec<u16>, n: Node, r: u16| {
            if n.t - start > limit {
                return;
            }
            let seq = nodes.len() as u32;
            let k = key(n.cell, n.heading, n.t, r, n.action.rank(), seq);
            nodes.push(n);
            rot_count.push(r);
            open.push(Reverse((k, seq)));
        };

        let dirs: &[Heading] = if turn > 0 {
            std::slice::from_ref(&heading)
        } else {
            &Heading::ALL
        };
        for &d in dirs {
            let next = cell.step(d);
            if !terrain.anchor_ok(next, fp, req.carrying) {
                continue;
            }
            let dst = Rect::footprint(next, fp);
            if !window_ok(t, spc, src, dst, Some(Motion::new(d, spc))) {
                continue;
            }
            let r = rot + u16::from(d != heading);
            push(
                &mut nodes,
                &mut rot_count,
                Node {
                    cell: next,
                    heading: d,
                    t: t + spc,
                    parent: idx,
                    action: Action::Move(d),
                },
                r,
            );
        }
        if turn > 0 {
            for (tn, hd) in [(Turn::Cw, heading.cw()), (Turn::Ccw, heading.ccw())] {
                if window_ok(t, turn, src, src, None) {
                    push(
                        &mut nodes,
                        &mut rot_count,
                        Node {
                            cell,
                            heading: hd,
                            t: t + turn,
                            parent: idx,
                            action: Action::Rotate(tn),
                        },
                        rot + 1,
                    );
                }
            }
        }
        if window_ok(t, 1, src, src, None) {
            push(
                &mut nodes,
                &mut rot_count,
                Node {
                    cell,
                    heading,
                    t: t + 1,
                    parent: idx,
                    action: Action::Wait,
                },
                rot,
            );
        }
    }

    if let Some(mut idx) = found {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        loop {
            let n = &nodes[idx as usize];
            states.push(PathState::new(Pose::new(n.cell, n.heading), n.t));
            if n.parent == u32::MAX {
                break;
            }
            actions.push(n.action);
            idx = n.parent;
        }
        states.reverse();
        actions.reverse();
        out.path = Some(TimedPath {
            agv: me,
            states,
            actions,
        });
    }
    out
}

/// Static reachability of `goal` ignoring time, other agents and corridors.
fn reachable(env: &PlanEnv<'_>, req: &PlanRequest, goal: Cell) -> bool {
    let t = env.terrain;
    let fp = req.spec.footprint;
    let mut seen = vec![false; t.cell_count()];
    let mut q = VecDeque::from([req.start.cell]);
    seen[t.idx(req.start.cell)] = true;
    while let Some(c) = q.pop_front() {
        if c == goal {
            return true;
        }
        for d in Heading::ALL {
            let n = c.step(d);
            if t.anchor_ok(n, fp, req.carrying) && !seen[t.idx(n)] {
                seen[t.idx(n)] = true;
                q.push_back(n);
            }
        }
    }
    false
}
