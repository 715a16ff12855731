//! Static warehouse geometry, agent specifications and occupancy queries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::executor::{ActivePlan, InFlight};
use crate::geom::{Cell, Heading, Pose, Rect};
use crate::orders::{SkuId, TaskId};
use crate::LayoutError;

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}
pub(crate) use id_type;

id_type!(AgvId);
id_type!(ShelfId);
id_type!(StationId);

/// Service time used by generated layouts and presets.
pub const DEFAULT_SERVICE_TIME: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShelfPod {
    pub id: ShelfId,
    pub home: Cell,
    /// Footprint side length in cells (1 or 2).
    pub size: u8,
    pub contents: BTreeMap<SkuId, u32>,
}

impl ShelfPod {
    pub fn rect(&self) -> Rect {
        Rect::footprint(self.home, self.size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Station {
    pub id: StationId,
    pub cell: Cell,
    /// Steps a presented shelf is held for picking.
    pub service_time: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgvSpec {
    pub id: AgvId,
    /// Side length in cells (1 or 2).
    pub footprint: u8,
    /// Inverse speed: steps needed to cross one cell.
    pub steps_per_cell: u32,
    pub kind: String,
    /// Steps per 90° rotation; 0 folds rotation into the next move.
    pub turn_cost: u32,
}

impl AgvSpec {
    pub fn unit(id: u32) -> Self {
        Self {
            id: AgvId(id),
            footprint: 1,
            steps_per_cell: 1,
            kind: "pod".into(),
            turn_cost: 0,
        }
    }

    /// Whether this AGV may carry a shelf of the given size.
    pub fn can_carry(&self, shelf_size: u8) -> bool {
        shelf_size <= self.footprint
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgvStart {
    pub spec: AgvSpec,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub width: i32,
    pub height: i32,
    /// Sorted by id.
    pub shelves: Vec<ShelfPod>,
    /// Sorted by id.
    pub stations: Vec<Station>,
    pub parking: Vec<Cell>,
    pub obstacles: BTreeSet<Cell>,
    /// Sorted by id.
    pub agvs: Vec<AgvStart>,
}

impl Layout {
    pub fn empty(width: i32, height: i32) -> Self {
        Self {
            width,
            height,
            shelves: Vec::new(),
            stations: Vec::new(),
            parking: Vec::new(),
            obstacles: BTreeSet::new(),
            agvs: Vec::new(),
        }
    }

    pub fn cell_count(&self) -> usize {
        (self.width.max(0) * self.height.max(0)) as usize
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    pub fn shelf_index(&self, id: ShelfId) -> Option<usize> {
        self.shelves.binary_search_by_key(&id, |s| s.id).ok()
    }

    pub fn shelf(&self, id: ShelfId) -> Option<&ShelfPod> {
        self.shelf_index(id).map(|i| &self.shelves[i])
    }

    pub fn station_index(&self, id: StationId) -> Option<usize> {
        self.stations.binary_search_by_key(&id, |s| s.id).ok()
    }

    pub fn station(&self, id: StationId) -> Option<&Station> {
        self.station_index(id).map(|i| &self.stations[i])
    }

    /// Anchor an AGV of the given footprint uses when docking at a station:
    /// the in-bounds block that covers the station cell with minimum shift.
    pub fn station_anchor(&self, station: &Station, footprint: u8) -> Cell {
        let f = i32::from(footprint);
        Cell::new(
            station.cell.x.min(self.width - f).max(0),
            station.cell.y.min(self.height - f).max(0),
        )
    }

    /// All distinct SKUs stocked anywhere, with the container size of the
    /// largest shelf holding them.
    pub fn sku_catalog(&self) -> Vec<crate::orders::Sku> {
        let mut sizes: BTreeMap<SkuId, u8> = BTreeMap::new();
        for s in &self.shelves {
            for sku in s.contents.keys() {
                let e = sizes.entry(*sku).or_insert(s.size);
                *e = (*e).max(s.size);
            }
        }
        sizes
            .into_iter()
            .map(|(id, size_class)| crate::orders::Sku { id, size_class })
            .collect()
    }

    /// Check every layout invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), LayoutError> {
        let invalid = |rule: &str, entity: String, cell: Option<Cell>| LayoutError::Invalid {
            rule: rule.to_string(),
            entity,
            cell,
        };
        if self.width < 1 || self.height < 1 {
            return Err(invalid("width and height must be at least 1", "layout".into(), None));
        }
        let (w, h) = (self.width, self.height);

        let mut ids = BTreeSet::new();
        for s in &self.shelves {
            if !ids.insert(s.id) {
                return Err(invalid("duplicate id", format!("shelf {}", s.id), Some(s.home)));
            }
            if s.size != 1 && s.size != 2 {
                return Err(invalid(
                    "shelf size must be 1 or 2",
                    format!("shelf {}", s.id),
                    Some(s.home),
                ));
            }
            if !s.rect().within(w, h) {
                return Err(invalid("shelf out of bounds", format!("shelf {}", s.id), Some(s.home)));
            }
        }
        let mut ids = BTreeSet::new();
        for st in &self.stations {
            if !ids.insert(st.id) {
                return Err(invalid("duplicate id", format!("station {}", st.id), Some(st.cell)));
            }
            if !self.in_bounds(st.cell) {
                return Err(invalid(
                    "station out of bounds",
                    format!("station {}", st.id),
                    Some(st.cell),
                ));
            }
            if st.service_time < 1 {
                return Err(invalid(
                    "service_time must be at least 1",
                    format!("station {}", st.id),
                    Some(st.cell),
                ));
            }
        }
        for p in &self.parking {
            if !self.in_bounds(*p) {
                return Err(invalid("parking cell out of bounds", "parking".into(), Some(*p)));
            }
        }
        for o in &self.obstacles {
            if !self.in_bounds(*o) {
                return Err(invalid("obstacle out of bounds", "obstacle".into(), Some(*o)));
            }
        }

        // Static entities must not share cells.
        let mut owner: BTreeMap<Cell, String> = BTreeMap::new();
        let mut claim = |c: Cell, who: String| -> Result<(), LayoutError> {
            if let Some(prev) = owner.get(&c) {
                return Err(LayoutError::Invalid {
                    rule: format!("static entities overlap ({prev})"),
                    entity: who,
                    cell: Some(c),
                });
            }
            owner.insert(c, who);
            Ok(())
        };
        for s in &self.shelves {
            for c in s.rect().cells() {
                claim(c, format!("shelf {}", s.id))?;
            }
        }
        for st in &self.stations {
            claim(st.cell, format!("station {}", st.id))?;
        }
        for o in &self.obstacles {
            claim(*o, "obstacle".into())?;
        }
        for p in &self.parking {
            if self.obstacles.contains(p) {
                return Err(invalid("parking cell on an obstacle", "parking".into(), Some(*p)));
            }
        }

        let mut ids = BTreeSet::new();
        let mut taken: BTreeMap<Cell, AgvId> = BTreeMap::new();
        for a in &self.agvs {
            let who = format!("agv {}", a.spec.id);
            if !ids.insert(a.spec.id) {
                return Err(invalid("duplicate id", who, Some(a.pose.cell)));
            }
            if a.spec.footprint != 1 && a.spec.footprint != 2 {
                return Err(invalid("agv footprint must be 1 or 2", who, Some(a.pose.cell)));
            }
            if a.spec.steps_per_cell < 1 {
                return Err(invalid("steps_per_cell must be at least 1", who, Some(a.pose.cell)));
            }
            let r = Rect::footprint(a.pose.cell, a.spec.footprint);
            if !r.within(w, h) {
                return Err(invalid("agv footprint out of bounds", who, Some(a.pose.cell)));
            }
            for c in r.cells() {
                if self.obstacles.contains(&c) {
                    return Err(invalid("agv start overlaps an obstacle", who, Some(c)));
                }
                if self.stations.iter().any(|s| s.cell == c) {
                    return Err(invalid("agv start overlaps a station", who, Some(c)));
                }
                if let Some(other) = taken.insert(c, a.spec.id) {
                    return Err(invalid(&format!("agv start overlaps agv {other}"), who, Some(c)));
                }
            }
        }
        if !is_sorted_by_key(&self.shelves, |s| s.id)
            || !is_sorted_by_key(&self.stations, |s| s.id)
            || !is_sorted_by_key(&self.agvs, |a| a.spec.id)
        {
            return Err(invalid("entities must be sorted by id", "layout".into(), None));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LayoutDoc::from(self)).expect("layout serializes")
    }
}

fn is_sorted_by_key<T, K: Ord>(v: &[T], f: impl Fn(&T) -> K) -> bool {
    v.windows(2).all(|p| f(&p[0]) < f(&p[1]))
}

// ---- layout file format ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct XyDoc {
    x: i32,
    y: i32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkuCountDoc {
    sku: SkuId,
    count: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShelfDoc {
    id: ShelfId,
    x: i32,
    y: i32,
    size: u8,
    #[serde(default)]
    contents: Vec<SkuCountDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StationDoc {
    id: StationId,
    x: i32,
    y: i32,
    service_time: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgvDoc {
    id: AgvId,
    x: i32,
    y: i32,
    heading: Heading,
    footprint: u8,
    steps_per_cell: u32,
    turn_cost: u32,
    kind: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutDoc {
    width: i32,
    height: i32,
    #[serde(default)]
    shelves: Vec<ShelfDoc>,
    #[serde(default)]
    stations: Vec<StationDoc>,
    #[serde(default)]
    parking: Vec<XyDoc>,
    #[serde(default)]
    obstacles: Vec<XyDoc>,
    #[serde(default)]
    agvs: Vec<AgvDoc>,
}

impl From<&Layout> for LayoutDoc {
    fn from(l: &Layout) -> Self {
        LayoutDoc {
            width: l.width,
            height: l.height,
            shelves: l
                .shelves
                .iter()
                .map(|s| ShelfDoc {
                    id: s.id,
                    x: s.home.x,
                    y: s.home.y,
                    size: s.size,
                    contents: s
                        .contents
                        .iter()
                        .map(|(sku, count)| SkuCountDoc {
                            sku: *sku,
                            count: *count,
                        })
                        .collect(),
                })
                .collect(),
            stations: l
                .stations
                .iter()
                .map(|s| StationDoc {
                    id: s.id,
                    x: s.cell.x,
                    y: s.cell.y,
                    service_time: s.service_time,
                })
                .collect(),
            parking: l.parking.iter().map(|c| XyDoc { x: c.x, y: c.y }).collect(),
            obstacles: l.obstacles.iter().map(|c| XyDoc { x: c.x, y: c.y }).collect(),
            agvs: l
                .agvs
                .iter()
                .map(|a| AgvDoc {
                    id: a.spec.id,
                    x: a.pose.cell.x,
                    y: a.pose.cell.y,
                    heading: a.pose.heading,
                    footprint: a.spec.footprint,
                    steps_per_cell: a.spec.steps_per_cell,
                    turn_cost: a.spec.turn_cost,
                    kind: a.spec.kind.clone(),
                })
                .collect(),
        }
    }
}

impl From<LayoutDoc> for Layout {
    fn from(d: LayoutDoc) -> Self {
        let mut shelves: Vec<ShelfPod> = d
            .shelves
            .into_iter()
            .map(|s| {
                let mut contents = BTreeMap::new();
                for c in s.contents {
                    *contents.entry(c.sku).or_insert(0) += c.count;
                }
                ShelfPod {
                    id: s.id,
                    home: Cell::new(s.x, s.y),
                    size: s.size,
                    contents,
                }
            })
            .collect();
        shelves.sort_by_key(|s| s.id);
        let mut stations: Vec<Station> = d
            .stations
            .into_iter()
            .map(|s| Station {
                id: s.id,
                cell: Cell::new(s.x, s.y),
                service_time: s.service_time,
            })
            .collect();
        stations.sort_by_key(|s| s.id);
        let mut agvs: Vec<AgvStart> = d
            .agvs
            .into_iter()
            .map(|a| AgvStart {
                spec: AgvSpec {
                    id: a.id,
                    footprint: a.footprint,
                    steps_per_cell: a.steps_per_cell,
                    kind: a.kind,
                    turn_cost: a.turn_cost,
                },
                pose: Pose::new(Cell::new(a.x, a.y), a.heading),
            })
            .collect();
        agvs.sort_by_key(|a| a.spec.id);
        Layout {
            width: d.width,
            height: d.height,
            shelves,
            stations,
            parking: d.parking.into_iter().map(|p| Cell::new(p.x, p.y)).collect(),
            obstacles: d.obstacles.into_iter().map(|p| Cell::new(p.x, p.y)).collect(),
            agvs,
        }
    }
}

/// Parse and validate a layout document.
pub fn load_layout(source: &str) -> Result<Layout, LayoutError> {
    let doc: LayoutDoc = serde_json::from_str(source).map_err(|e| LayoutError::Parse(e.to_string()))?;
    let layout = Layout::from(doc);
    layout.validate()?;
    Ok(layout)
}

pub fn serialize_layout(layout: &Layout) -> String {
    layout.to_json()
}

/// Build a block-structured layout: 2-row shelf blocks separated by 1-cell
/// aisles, stations spread along the south boundary, AGVs parked along the
/// north boundary.
pub fn generate_layout(
    width: u32,
    height: u32,
    shelf_count: u32,
    station_count: u32,
    agv_specs: &[AgvSpec],
    seed: u64,
) -> Result<Layout, LayoutError> {
    let (w, h) = (width as i32, height as i32);
    if w < 1 || h < 1 {
        return Err(LayoutError::Infeasible("width and height must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout = Layout::empty(w, h);

    // Block slots: rows y, y+1 with y = 2 + 3k and y + 1 <= h - 3; columns
    // x, x+1 with x = 1 + 3j and x + 1 <= w - 3.
    let mut slots = Vec::new();
    let mut y = 2;
    while y < h - 3 {
        let mut x = 1;
        while x < w - 3 {
            slots.push(Cell::new(x, y));
            x += 3;
        }
        y += 3;
    }
    let capacity = slots.len() as u32 * 4;
    if shelf_count > capacity {
        return Err(LayoutError::Infeasible(format!(
            "{shelf_count} shelves do not fit a {width}x{height} floor with aisles (capacity {capacity})"
        )));
    }
    if station_count > width {
        return Err(LayoutError::Infeasible(format!(
            "{station_count} stations do not fit the {width}-cell south boundary"
        )));
    }

    slots.shuffle(&mut rng);
    let sku_count = shelf_count.div_ceil(2).max(1);
    let mut placed = 0u32;
    'outer: for slot in &slots {
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            if placed == shelf_count {
                break 'outer;
            }
            let mut contents = BTreeMap::new();
            contents.insert(SkuId(placed % sku_count), 25);
            let extra = 3.min(sku_count - 1);
            while contents.len() < 1 + extra as usize {
                contents.insert(SkuId(rng.random_range(0..sku_count)), 25);
            }
            layout.shelves.push(ShelfPod {
                id: ShelfId(placed),
                home: Cell::new(slot.x + dx, slot.y + dy),
                size: 1,
                contents,
            });
            placed += 1;
        }
    }

    for i in 0..station_count {
        let x = ((2 * i + 1) * width / (2 * station_count)) as i32;
        layout.stations.push(Station {
            id: StationId(i),
            cell: Cell::new(x, h - 1),
            service_time: DEFAULT_SERVICE_TIME,
        });
    }

    let n = agv_specs.len() as i32;
    let mut next_free = 0;
    for (i, spec) in agv_specs.iter().enumerate() {
        let x = (i as i32 * w / n.max(1)).max(next_free);
        let f = i32::from(spec.footprint);
        if x + f > w || f > h {
            return Err(LayoutError::Infeasible(format!(
                "{} AGVs do not fit along the {width}-cell north boundary",
                agv_specs.len()
            )));
        }
        next_free = x + f;
        let anchor = Cell::new(x, 0);
        layout.parking.extend(Rect::footprint(anchor, spec.footprint).cells());
        layout.agvs.push(AgvStart {
            spec: spec.clone(),
            pose: Pose::new(anchor, Heading::S),
        });
    }
    layout.agvs.sort_by_key(|a| a.spec.id);
    layout.validate().map_err(|e| LayoutError::Infeasible(e.to_string()))?;
    Ok(layout)
}

/// Traversability of an anchor for an agent, with every shelf at home.
/// Unloaded agents pass beneath stored shelves; loaded agents do not.
pub fn is_traversable(
    layout: &Layout,
    anchor: Cell,
    footprint: u8,
    carrying: bool,
    dynamic_blocks: &BTreeSet<Cell>,
) -> bool {
    let r = Rect::footprint(anchor, footprint);
    if !r.within(layout.width, layout.height) {
        return false;
    }
    r.cells().all(|c| {
        !layout.obstacles.contains(&c)
            && !dynamic_blocks.contains(&c)
            && !(carrying && layout.shelves.iter().any(|s| s.rect().contains(c)))
    })
}

/// Live traversability grid: obstacles plus which shelves are currently at home.
#[derive(Clone, Debug)]
pub struct Terrain {
    pub width: i32,
    pub height: i32,
    obstacle: Vec<bool>,
    shelf_at: Vec<Option<u32>>,
    stored: Vec<bool>,
}

impl Terrain {
    pub fn new(layout: &Layout) -> Self {
        let n = layout.cell_count();
        let mut obstacle = vec![false; n];
        let mut shelf_at = vec![None; n];
        for o in &layout.obstacles {
            obstacle[(o.y * layout.width + o.x) as usize] = true;
        }
        for (i, s) in layout.shelves.iter().enumerate() {
            for c in s.rect().cells() {
                shelf_at[(c.y * layout.width + c.x) as usize] = Some(i as u32);
            }
        }
        Self {
            width: layout.width,
            height: layout.height,
            obstacle,
            shelf_at,
            stored: vec![true; layout.shelves.len()],
        }
    }

    #[inline]
    pub fn idx(&self, c: Cell) -> usize {
        (c.y * self.width + c.x) as usize
    }

    pub fn cell_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn set_stored(&mut self, shelf_index: usize, stored: bool) {
        self.stored[shelf_index] = stored;
    }

    pub fn is_stored(&self, shelf_index: usize) -> bool {
        self.stored[shelf_index]
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.obstacle[self.idx(c)]
    }

    /// Whether a stored shelf currently sits on `c`.
    pub fn stored_shelf_at(&self, c: Cell) -> Option<usize> {
        self.shelf_at[self.idx(c)]
            .map(|i| i as usize)
            .filter(|&i| self.stored[i])
    }

    pub fn anchor_ok(&self, anchor: Cell, footprint: u8, carrying: bool) -> bool {
        let r = Rect::footprint(anchor, footprint);
        if !r.within(self.width, self.height) {
            return false;
        }
        r.cells().all(|c| {
            let i = self.idx(c);
            !self.obstacle[i] && !(carrying && self.shelf_at[i].is_some_and(|s| self.stored[s as usize]))
        })
    }

    /// Precomputed anchor traversability for one agent class.
    pub fn pass_grid(&self, footprint: u8, carrying: bool) -> Vec<bool> {
        let mut out = vec![false; self.cell_count()];
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                out[self.idx(c)] = self.anchor_ok(c, footprint, carrying);
            }
        }
        out
    }
}

/// Live health of an AGV.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Health {
    Active,
    Failed { recovery_at: u32 },
}

impl Health {
    pub fn is_active(self) -> bool {
        matches!(self, Health::Active)
    }

    pub fn remaining_down_steps(self, now: u32) -> u32 {
        match self {
            Health::Active => 0,
            Health::Failed { recovery_at } => recovery_at.saturating_sub(now),
        }
    }
}

/// Live state of one AGV, owned by the engine.
#[derive(Clone, Debug)]
pub struct AgvState {
    pub spec: AgvSpec,
    pub pose: Pose,
    pub carrying: Option<ShelfId>,
    pub task: Option<TaskId>,
    pub health: Health,
    pub plan: Option<ActivePlan>,
    /// Multi-step action currently being executed.
    pub in_flight: Option<InFlight>,
    /// Consecutive steps spent dwelling against the agent's will.
    pub involuntary_dwell: u32,
}

impl AgvState {
    pub fn new(start: &AgvStart) -> Self {
        Self {
            spec: start.spec.clone(),
            pose: start.pose,
            carrying: None,
            task: None,
            health: Health::Active,
            plan: None,
            in_flight: None,
            involuntary_dwell: 0,
        }
    }

    pub fn id(&self) -> AgvId {
        self.spec.id
    }

    pub fn is_active(&self) -> bool {
        self.health.is_active()
    }

    pub fn rect(&self) -> Rect {
        Rect::footprint(self.pose.cell, self.spec.footprint)
    }

    /// Cells the AGV occupies right now, including a move in progress.
    pub fn occupancy(&self) -> Rect {
        match &self.in_flight {
            Some(f) => f.occupancy(self.spec.footprint),
            None => self.rect(),
        }
    }

    /// Pose and step from which new plans for this AGV start.
    pub fn plan_origin(&self, now: u32) -> (Pose, u32) {
        match &self.in_flight {
            Some(f) => (f.to, f.ends),
            None => (self.pose, now),
        }
    }
}
