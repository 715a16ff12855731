//! Run and experiment configuration, and the built-in scenario presets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::executor::{SafetyMargin, DEFAULT_RESOLUTION};
use crate::failures::FailureConfig;
use crate::geom::{Cell, Heading, Pose};
use crate::orders::{OrderPattern, SkuId};
use crate::planner::{DEFAULT_EXPANSION_BUDGET, DEFAULT_NODE_BUDGET};
use crate::scheduler::SchedulerPolicy;
use crate::world::{
    generate_layout, AgvId, AgvSpec, AgvStart, Layout, ShelfId, ShelfPod, Station, StationId, DEFAULT_SERVICE_TIME,
};
use crate::SimError;

/// Steps a run may take before unresolved orders expire.
pub const DEFAULT_HORIZON: u32 = 2000;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PlannerChoice {
    AStar,
    Cbs,
    /// Reserved for plug-in planners; no built-in implementation.
    External(String),
}

impl PlannerChoice {
    pub fn label(&self) -> String {
        match self {
            PlannerChoice::AStar => "astar".into(),
            PlannerChoice::Cbs => "cbs".into(),
            PlannerChoice::External(n) => format!("external:{n}"),
        }
    }
}

impl fmt::Display for PlannerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for PlannerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "astar" | "a*" => Ok(PlannerChoice::AStar),
            "cbs" => Ok(PlannerChoice::Cbs),
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => Ok(PlannerChoice::External(name.to_string())),
                _ => Err(format!(
                    "unknown planner `{s}` (expected astar, cbs or external:<name>)"
                )),
            },
        }
    }
}

/// The three built-in evaluation environments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Homogeneous,
    Heterogeneous,
    Fault,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Scenario::Homogeneous => "Ho",
            Scenario::Heterogeneous => "He",
            Scenario::Fault => "FT",
        }
    }

    pub fn layout(self) -> Layout {
        match self {
            Scenario::Homogeneous | Scenario::Fault => homogeneous_layout(),
            Scenario::Heterogeneous => heterogeneous_layout(),
        }
    }

    pub fn failures(self) -> FailureConfig {
        match self {
            Scenario::Fault => FailureConfig::standard(),
            _ => FailureConfig::disabled(),
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "homogeneous" | "ho" => Ok(Scenario::Homogeneous),
            "heterogeneous" | "he" => Ok(Scenario::Heterogeneous),
            "fault" | "ft" => Ok(Scenario::Fault),
            other => Err(format!(
                "unknown scenario `{other}` (expected homogeneous, heterogeneous or fault)"
            )),
        }
    }
}

/// 20×15 floor, 9 unit AGVs, 32 shelves, 8 stations.
pub fn homogeneous_layout() -> Layout {
    let specs: Vec<AgvSpec> = (0..9).map(AgvSpec::unit).collect();
    generate_layout(20, 15, 32, 8, &specs, 1).expect("preset layout is feasible")
}

/// 20×15 floor with 2×2 blocks on a 4-cell pitch and 2-wide aisles: eight
/// 2×2 shelves, six blocks of four 1×1 shelves, six 1×1 and three 2×2 AGVs.
pub fn heterogeneous_layout() -> Layout {
    let (w, h) = (20, 15);
    let mut l = Layout::empty(w, h);
    let big_blocks = [(0, 0), (2, 0), (4, 0), (1, 1), (3, 1), (0, 2), (2, 2), (4, 2)];
    let small_blocks = [(1, 0), (3, 0), (0, 1), (2, 1), (4, 1), (1, 2)];
    let origin = |(c, r): (i32, i32)| Cell::new(2 + 4 * c, 2 + 4 * r);
    let sku_count = 16;
    let mut push = |home: Cell, size: u8| {
        let id = l.shelves.len() as u32;
        l.shelves.push(ShelfPod {
            id: ShelfId(id),
            home,
            size,
            contents: BTreeMap::from([(SkuId(id % sku_count), 25)]),
        });
    };
    for b in big_blocks {
        push(origin(b), 2);
    }
    for b in small_blocks {
        let o = origin(b);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            push(Cell::new(o.x + dx, o.y + dy), 1);
        }
    }
    let n = 8;
    for i in 0..n {
        l.stations.push(Station {
            id: StationId(i),
            cell: Cell::new(((2 * i + 1) * w as u32 / (2 * n)) as i32, h - 1),
            service_time: DEFAULT_SERVICE_TIME,
        });
    }
    let big = |id: u32| AgvSpec {
        id: AgvId(id),
        footprint: 2,
        steps_per_cell: 2,
        kind: "heavy".into(),
        turn_cost: 1,
    };
    let starts = [
        (AgvSpec::unit(0), Cell::new(3, 0)),
        (AgvSpec::unit(1), Cell::new(4, 0)),
        (AgvSpec::unit(2), Cell::new(5, 0)),
        (AgvSpec::unit(3), Cell::new(11, 0)),
        (AgvSpec::unit(4), Cell::new(12, 0)),
        (AgvSpec::unit(5), Cell::new(13, 0)),
        (big(6), Cell::new(0, 0)),
        (big(7), Cell::new(8, 0)),
        (big(8), Cell::new(16, 0)),
    ];
    for (spec, anchor) in starts {
        l.parking
            .extend(crate::geom::Rect::footprint(anchor, spec.footprint).cells());
        l.agvs.push(AgvStart {
            spec,
            pose: Pose::new(anchor, Heading::S),
        });
    }
    l.parking.sort_by_key(|c| (c.y, c.x));
    l.validate().expect("preset layout is valid");
    l
}

/// Everything a single run needs apart from its seed.
#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub layout: Layout,
    /// Environment label written to result rows.
    pub env_label: String,
    pub pattern: OrderPattern,
    pub scheduler: SchedulerPolicy,
    pub planner: PlannerChoice,
    pub failures: FailureConfig,
    /// `(step, agv)` failures applied in addition to random ones.
    pub scripted_failures: Vec<(u32, AgvId)>,
    pub horizon: u32,
    /// Report planner cost as node expansions instead of milliseconds.
    pub deterministic_ct: bool,
    pub node_budget: u32,
    /// Low-level expansions one CBS call may spend before falling back.
    pub expansion_budget: u64,
    /// Margin used by the in-run continuous check.
    pub margin: SafetyMargin,
    pub resolution: u32,
    pub record_events: bool,
}

impl EngineConfig {
    pub fn new(layout: Layout, env_label: impl Into<String>) -> Self {
        Self {
            layout,
            env_label: env_label.into(),
            pattern: OrderPattern::OneShot { n: 30 },
            scheduler: SchedulerPolicy::Ta,
            planner: PlannerChoice::AStar,
            failures: FailureConfig::disabled(),
            scripted_failures: Vec::new(),
            horizon: DEFAULT_HORIZON,
            deterministic_ct: false,
            node_budget: DEFAULT_NODE_BUDGET,
            expansion_budget: DEFAULT_EXPANSION_BUDGET,
            margin: SafetyMargin::ZERO,
            resolution: DEFAULT_RESOLUTION,
            record_events: true,
        }
    }

    pub fn scenario(s: Scenario) -> Self {
        let mut c = Self::new(s.layout(), s.label());
        c.failures = s.failures();
        c
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon < 1 {
            return Err(SimError::Config("horizon must be at least 1".into()));
        }
        if self.resolution < 2 {
            return Err(SimError::Config("resolution must be at least 2".into()));
        }
        if let PlannerChoice::External(name) = &self.planner {
            return Err(SimError::Config(format!(
                "no external planner named `{name}` is registered"
            )));
        }
        self.failures.validate()?;
        self.pattern.validate()?;
        self.layout.validate()?;
        for (_, agv) in &self.scripted_failures {
            if !self.layout.agvs.iter().any(|a| a.spec.id == *agv) {
                return Err(SimError::UnknownAgv(*agv));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub engine: EngineConfig,
    pub repeats: u32,
    pub base_seed: u64,
    pub parallel: bool,
}

impl ExperimentConfig {
    pub fn new(engine: EngineConfig, repeats: u32, base_seed: u64) -> Self {
        Self {
            engine,
            repeats,
            base_seed,
            parallel: true,
        }
    }
}
