//! Sequential planning: each agent avoids the paths of agents planned before it.

use crate::geom::Rect;

use super::{
    search, PlanEnv, PlanOutcome, PlanRequest, ReservationTable, SearchSpec, TimedPath, Timeline, BACKOFF_STEPS,
};

/// Plan agents in ascending id order.
pub fn plan_prioritized(
    requests: &[PlanRequest],
    env: &PlanEnv<'_>,
    reserved: &ReservationTable,
    start_step: u32,
) -> PlanOutcome {
    let mut order: Vec<&PlanRequest> = requests.iter().collect();
    order.sort_by_key(|r| r.id());
    plan_prioritized_ordered(&order, env, reserved, start_step)
}

/// Plan agents in the given order. Agents not yet planned are only treated
/// as occupying their start cells for the first step window, so earlier
/// agents may route through them and later agents must give way.
pub fn plan_prioritized_ordered(
    order: &[&PlanRequest],
    env: &PlanEnv<'_>,
    reserved: &ReservationTable,
    start_step: u32,
) -> PlanOutcome {
    let mut out = PlanOutcome::default();
    let mut table = reserved.clone();
    for r in order {
        table.push(
            Timeline::stationary(r.id(), Rect::footprint(r.start.cell, r.spec.footprint), start_step)
                .with_until(start_step + 2),
        );
    }
    for r in order {
        table.remove(r.id());
        let spec = SearchSpec {
            req: r,
            start_step,
            constraints: &[],
        };
        let res = search(&spec, env, &table);
        out.expansions += res.expansions;
        out.searches += 1;
        let path = match res.path {
            Some(p) => p,
            None => {
                out.failed.insert(r.id());
                TimedPath::wait_in_place(r.id(), r.start, start_step, BACKOFF_STEPS)
            }
        };
        table.push(Timeline::from_path(&path, r.spec.footprint));
        out.paths.insert(r.id(), path);
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::geom::{Cell, Heading, Pose};
    use crate::planner::{detect_conflicts, Action, Blocked};
    use crate::world::{AgvId, AgvSpec, Layout, Terrain};

    fn env_for(l: &Layout) -> (Terrain, Blocked) {
        (Terrain::new(l), Blocked::none(l.width, l.height))
    }

    #[test]
    fn disjoint_routes_match_single_agent_optima() {
        let l = Layout::empty(6, 6);
        let (t, b) = env_for(&l);
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
        let out = plan_prioritized(&reqs, &env, &ReservationTable::new(), 0);
        assert!(out.failed.is_empty());
        assert_eq!(out.paths[&AgvId(0)].cost(), 5);
        assert_eq!(out.paths[&AgvId(1)].cost(), 5);
    }

    #[test]
    fn head_on_in_a_corridor_with_a_pocket() {
        // Row 0 is a corridor; (4,1) is the only side pocket.
        let mut l = Layout::empty(7, 2);
        for x in 0..7 {
            if x != 4 {
                l.obstacles.insert(Cell::new(x, 1));
            }
        }
        let (t, b) = env_for(&l);
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
                Cell::new(6, 0),
            ),
            PlanRequest::new(
                AgvSpec::unit(1),
                Pose::new(Cell::new(6, 0), Heading::W),
                Cell::new(0, 0),
            ),
        ];
        let out = plan_prioritized(&reqs, &env, &ReservationTable::new(), 0);
        assert!(out.failed.is_empty());
        let fps = BTreeMap::from([(AgvId(0), 1), (AgvId(1), 1)]);
        let paths: Vec<_> = out.paths.values().cloned().collect();
        assert_eq!(detect_conflicts(&paths, &fps, &[]), None);
        let detoured = |p: &TimedPath| p.actions.contains(&Action::Wait) || p.cost() > 6;
        assert_eq!(paths.iter().filter(|p| detoured(p)).count(), 1);
    }

    #[test]
    fn zero_requests_give_an_empty_map() {
        let l = Layout::empty(2, 2);
        let (t, b) = env_for(&l);
        let env = PlanEnv {
            terrain: &t,
            blocked: &b,
            rest: None,
            horizon: 64,
        };
        assert!(plan_prioritized(&[], &env, &ReservationTable::new(), 0)
            .paths
            .is_empty());
    }
}
