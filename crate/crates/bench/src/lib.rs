//! Fixed workloads shared by the benchmarks.

use std::sync::Arc;

use rmfs_core::engine::{EngineConfig, Scenario};
use rmfs_core::planner::PlanRequest;
use rmfs_core::world::Terrain;
use rmfs_core::{Cell, Heading, Layout, PlannerChoice, Pose, SimState};

/// The homogeneous preset floor with `n` AGVs sent to the opposite corner
/// region, so their routes cross.
pub fn crossing_requests(n: usize) -> (Terrain, Vec<PlanRequest>) {
    let layout: Layout = Scenario::Homogeneous.layout();
    let terrain = Terrain::new(&layout);
    let reqs = layout
        .agvs
        .iter()
        .take(n)
        .map(|a| {
            let s = a.pose.cell;
            let goal = Cell::new(layout.width - 1 - s.x, layout.height - 1 - s.y);
            let goal = nearest_free(&terrain, goal);
            PlanRequest::new(a.spec.clone(), Pose::new(s, Heading::E), goal)
        })
        .collect();
    (terrain, reqs)
}

fn nearest_free(t: &Terrain, c: Cell) -> Cell {
    (0..t.width + t.height)
        .flat_map(|r| {
            (-r..=r).flat_map(move |dx| {
                [
                    Cell::new(c.x + dx, c.y + r - dx.abs()),
                    Cell::new(c.x + dx, c.y - r + dx.abs()),
                ]
            })
        })
        .find(|&p| p.x >= 0 && p.y >= 0 && p.x < t.width && p.y < t.height && t.anchor_ok(p, 1, false))
        .expect("floor has a free cell")
}

/// A simulation of `scenario` advanced `warmup` steps, ready to be stepped.
pub fn warm_sim(scenario: Scenario, planner: PlannerChoice, warmup: u32) -> SimState {
    let mut c = EngineConfig::scenario(scenario);
    c.planner = planner;
    c.deterministic_ct = true;
    c.record_events = false;
    let mut sim = SimState::new(Arc::new(c), 1).expect("preset config is valid");
    for _ in 0..warmup {
        sim.step();
    }
    sim
}
