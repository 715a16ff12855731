//! Conflict-Based Search over a group of agents, with every agent outside the
//! group treated as a fixed reservation.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::rc::Rc;

use super::{
    first_conflict, plan_prioritized, search, ConflictKind, Constraint, PlanEnv, PlanOutcome, PlanRequest,
    ReservationTable, SearchSpec, TimedPath, Timeline, BACKOFF_STEPS,
};

struct CtNode {
    constraints: Vec<Constraint>,
    paths: Vec<Rc<TimedPath>>,
    timelines: Vec<Rc<Timeline>>,
}

/// `(step, kind, cell, i, j)` of a conflict between timelines `i` and `j`.
type PairConflict = (u32, ConflictKind, crate::geom::Cell, usize, usize);

/// Earliest conflict among the timelines and the number of conflicting pairs.
fn scan(tls: &[Rc<Timeline>]) -> (Option<PairConflict>, u32) {
    let mut best = None;
    let mut pairs = 0;
    for i in 0..tls.len() {
        for j in i + 1..tls.len() {
            if let Some((t, k, c)) = first_conflict(&tls[i], &tls[j]) {
                pairs += 1;
                let better = match best {
                    None => true,
                    Some((bt, _, _, _, _)) => t < bt,
                };
                if better {
                    best = Some((t, k, c, i, j));
                }
            }
        }
    }
    (best, pairs)
}

/// Optimal (sum-of-costs) joint plan for `requests`. Agents whose search fails
/// outright get a Wait backoff and become fixed obstacles for the rest.
/// When `node_budget` CT nodes are exhausted the result comes from
/// prioritized planning and is flagged suboptimal.
pub fn plan_cbs(
    requests: &[PlanRequest],
    env: &PlanEnv<'_>,
    reserved: &ReservationTable,
    start_step: u32,
    node_budget: u32,
) -> PlanOutcome {
    plan_cbs_limited(requests, env, reserved, start_step, node_budget, u64::MAX)
}

/// [`plan_cbs`] that also falls back once the low-level searches have
/// expanded `expansion_budget` nodes in total.
pub fn plan_cbs_limited(
    requests: &[PlanRequest],
    env: &PlanEnv<'_>,
    reserved: &ReservationTable,
    start_step: u32,
    node_budget: u32,
    expansion_budget: u64,
) -> PlanOutcome {
    let mut out = PlanOutcome::default();
    let mut reqs: Vec<&PlanRequest> = requests.iter().collect();
    reqs.sort_by_key(|r| r.id());

    // Root: independent searches; agents without any path become fixed.
    let mut table = reserved.clone();
    let mut root: Vec<Option<TimedPath>>;
    loop {
        root = Vec::with_capacity(reqs.len());
        let mut newly_failed = false;
        for r in &reqs {
            if out.failed.contains(&r.id()) {
                root.push(None);
                continue;
            }
            let res = search(
                &SearchSpec {
                    req: r,
                    start_step,
                    constraints: &[],
                },
                env,
                &table,
            );
            out.expansions += res.expansions;
            out.searches += 1;
            match res.path {
                Some(p) => root.push(Some(p)),
                None => {
                    out.failed.insert(r.id());
                    let wait = TimedPath::wait_in_place(r.id(), r.start, start_step, BACKOFF_STEPS);
                    table.push(Timeline::from_path(&wait, r.spec.footprint));
                    out.paths.insert(r.id(), wait);
                    root.push(None);
                    newly_failed = true;
                }
            }
        }
        if !newly_failed {
            break;
        }
    }

    let movable: Vec<&PlanRequest> = reqs.iter().copied().filter(|r| !out.failed.contains(&r.id())).collect();
    let paths: Vec<Rc<TimedPath>> = root.into_iter().flatten().map(Rc::new).collect();
    let timelines: Vec<Rc<Timeline>> = paths
        .iter()
        .zip(&movable)
        .map(|(p, r)| Rc::new(Timeline::from_path(p, r.spec.footprint)))
        .collect();
    let cost: u32 = paths.iter().map(|p| p.cost()).sum();
    let mut nodes = vec![CtNode {
        constraints: Vec::new(),
        paths,
        timelines,
    }];
    let (_, pairs) = scan(&nodes[0].timelines);
    let mut open = BinaryHeap::from([Reverse((cost, pairs, 0usize))]);

    while let Some(Reverse((_, _, idx))) = open.pop() {
        if out.ct_nodes >= node_budget || out.expansions >= expansion_budget {
            break;
        }
        out.ct_nodes += 1;
        let (conflict, _) = scan(&nodes[idx].timelines);
        let Some((t, kind, cell, i, j)) = conflict else {
            let node = &nodes[idx];
            for (p, r) in node.paths.iter().zip(&movable) {
                out.paths.insert(r.id(), (**p).clone());
            }
            return out;
        };
        if t <= start_step && kind == ConflictKind::Vertex {
            continue;
        }
        for who in [i, j] {
            let agv = movable[who].id();
            let tl = &nodes[idx].timelines[who];
            let con = match kind {
                ConflictKind::Edge => Constraint::Edge {
                    agv,
                    step: t,
                    from: tl.occ_at(t).unwrap(),
                    to: tl.occ_at(t + 1).unwrap(),
                    motion: tl.motion_at(t),
                },
                _ => Constraint::Vertex { agv, cell, step: t },
            };
            let mut constraints = nodes[idx].constraints.clone();
            constraints.push(con);
            let res = search(
                &SearchSpec {
                    req: movable[who],
                    start_step,
                    constraints: &constraints,
                },
                env,
                &table,
            );
            out.expansions += res.expansions;
            out.searches += 1;
            let Some(path) = res.path else { continue };
            let mut paths = nodes[idx].paths.clone();
            let mut timelines = nodes[idx].timelines.clone();
            timelines[who] = Rc::new(Timeline::from_path(&path, movable[who].spec.footprint));
            paths[who] = Rc::new(path);
            let cost: u32 = paths.iter().map(|p| p.cost()).sum();
            let (_, pairs) = scan(&timelines);
            let child = nodes.len();
            nodes.push(CtNode {
                constraints,
                paths,
                timelines,
            });
            open.push(Reverse((cost, pairs, child)));
        }
    }

    // Budget exhausted or no consistent node: fall back.
    let mut fb = plan_prioritized(requests, env, reserved, start_step);
    fb.expansions += out.expansions;
    fb.searches += out.searches;
    fb.ct_nodes = out.ct_nodes;
    fb.suboptimal = true;
    fb
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::geom::{Cell, Heading, Pose};
    use crate::planner::{detect_conflicts, Blocked};
    use crate::world::{AgvId, AgvSpec, Layout, Terrain};

    #[test]
    fn independent_agents_need_only_the_root() {
        let l = Layout::empty(6, 6);
        let t = Terrain::new(&l);
        let b = Blocked::none(6, 6);
        let env = PlanEnv {
            terrain: &t,
            blocked: &b,
            rest: None,
            horizon: 64,
        };
        let reqs = vec![
            PlanRequest::new(
                AgvSpec::unit(0),
                Pose::new(Cell::new(0, 0), Heading::E),
                Cell::new(5, 0),
            ),
            PlanRequest::new(
                AgvSpec::unit(1),
                Pose::new(Cell::new(0, 5), Heading::E),
                Cell::new(5, 5),
            ),
        ];
        let out = plan_cbs(&reqs, &env, &ReservationTable::new(), 0, 100);
        assert_eq!(out.ct_nodes, 1);
        assert_eq!(out.sum_of_costs(), 10);
        assert!(!out.suboptimal);
    }

    #[test]
    fn dense_instance_over_budget_falls_back_conflict_free() {
        let l = Layout::empty(5, 5);
        let t = Terrain::new(&l);
        let b = Blocked::none(5, 5);
        let env = PlanEnv {
            terrain: &t,
            blocked: &b,
            rest: None,
            horizon: 64,
        };
        // Four agents crossing through the centre.
        let ends = [((0, 2), (4, 2)), ((4, 2), (0, 2)), ((2, 0), (2, 4)), ((2, 4), (2, 0))];
        let reqs: Vec<_> = ends
            .iter()
            .enumerate()
            .map(|(i, ((sx, sy), (gx, gy)))| {
                PlanRequest::new(
                    AgvSpec::unit(i as u32),
                    Pose::new(Cell::new(*sx, *sy), Heading::E),
                    Cell::new(*gx, *gy),
                )
            })
            .collect();
        let out = plan_cbs(&reqs, &env, &ReservationTable::new(), 0, 1);
        assert!(out.failed.is_empty());
        assert!(out.suboptimal);
        let fps: BTreeMap<_, _> = (0..4).map(|i| (AgvId(i), 1u8)).collect();
        let paths: Vec<_> = out.paths.values().cloned().collect();
        assert_eq!(detect_conflicts(&paths, &fps, &[]), None);
    }
}
