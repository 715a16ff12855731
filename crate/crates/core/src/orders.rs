//! Order streams, inventory and the task stage machine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, Zipf};
use serde::{Deserialize, Serialize};

use crate::world::{id_type, AgvId, AgvState, Layout, ShelfId, StationId, Terrain};
use crate::SimError;

id_type!(SkuId);
id_type!(OrderId);
id_type!(TaskId);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sku {
    pub id: SkuId,
    /// Container size (1 or 2).
    pub size_class: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrderStatus {
    Pending,
    Assigned,
    Completed,
    Expired,
}

impl OrderStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OrderStatus::Pending => "pending",
            OrderStatus::Assigned => "assigned",
            OrderStatus::Completed => "completed",
            OrderStatus::Expired => "expired",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Order {
    pub id: OrderId,
    pub sku: SkuId,
    pub quantity: u32,
    pub station: StationId,
    pub release_step: u32,
    pub status: OrderStatus,
    pub completed_step: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskStage {
    GoToShelf,
    LiftShelf,
    CarryToStation,
    WaitService,
    ReturnShelf,
    DropShelf,
    Done,
}

impl TaskStage {
    pub const SEQUENCE: [TaskStage; 7] = [
        TaskStage::GoToShelf,
        TaskStage::LiftShelf,
        TaskStage::CarryToStation,
        TaskStage::WaitService,
        TaskStage::ReturnShelf,
        TaskStage::DropShelf,
        TaskStage::Done,
    ];

    pub fn next(self) -> Option<TaskStage> {
        let i = Self::SEQUENCE.iter().position(|s| *s == self).unwrap();
        Self::SEQUENCE.get(i + 1).copied()
    }

    /// Stages during which the AGV holds the shelf.
    pub fn is_carrying(self) -> bool {
        matches!(
            self,
            TaskStage::CarryToStation | TaskStage::WaitService | TaskStage::ReturnShelf | TaskStage::DropShelf
        )
    }

    /// Stages completed by arriving somewhere (the rest by dwelling).
    pub fn is_travel(self) -> bool {
        matches!(
            self,
            TaskStage::GoToShelf | TaskStage::CarryToStation | TaskStage::ReturnShelf
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskStage::GoToShelf => "go_to_shelf",
            TaskStage::LiftShelf => "lift_shelf",
            TaskStage::CarryToStation => "carry_to_station",
            TaskStage::WaitService => "wait_service",
            TaskStage::ReturnShelf => "return_shelf",
            TaskStage::DropShelf => "drop_shelf",
            TaskStage::Done => "done",
        }
    }
}

impl fmt::Display for TaskStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub order: OrderId,
    pub shelf: ShelfId,
    pub station: StationId,
    pub stage: TaskStage,
    pub assigned_agv: Option<AgvId>,
    /// Step at which the current stage began.
    pub stage_entered: u32,
    /// Active steps spent in the current dwell stage.
    pub stage_elapsed: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderPattern {
    OneShot {
        n: u32,
    },
    Wave {
        waves: u32,
        per_wave: u32,
        interval: u32,
    },
    /// `n` orders at step 0 with Zipf-skewed SKU popularity.
    Hotspot {
        n: u32,
        zipf_s: f64,
    },
    Burst {
        base_rate: f64,
        burst_rate: f64,
        burst_start: u32,
        burst_len: u32,
        horizon: u32,
    },
    Steady {
        rate: f64,
        horizon: u32,
    },
}

impl OrderPattern {
    pub fn validate(&self) -> Result<(), SimError> {
        let rate_ok = |r: f64| r.is_finite() && r >= 0.0;
        let ok = match *self {
            OrderPattern::OneShot { .. } | OrderPattern::Wave { .. } => true,
            OrderPattern::Hotspot { zipf_s, .. } => zipf_s.is_finite() && zipf_s > 0.0,
            OrderPattern::Burst {
                base_rate, burst_rate, ..
            } => rate_ok(base_rate) && rate_ok(burst_rate),
            OrderPattern::Steady { rate, .. } => rate_ok(rate),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("invalid order pattern parameters: {self:?}")))
        }
    }

    /// Short label used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            OrderPattern::OneShot { .. } => "os",
            OrderPattern::Wave { .. } => "wave",
            OrderPattern::Hotspot { .. } => "hotspot",
            OrderPattern::Burst { .. } => "burst",
            OrderPattern::Steady { .. } => "steady",
        }
    }
}

fn poisson_count<R: Rng>(rate: f64, rng: &mut R) -> u32 {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as u32
}

/// Orders sorted by release step, ids in release order.
pub fn generate_orders(
    pattern: &OrderPattern,
    skus: &[Sku],
    stations: &[StationId],
    seed: u64,
) -> Result<Vec<Order>, SimError> {
    pattern.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut releases: Vec<u32> = Vec::new();
    match *pattern {
        OrderPattern::OneShot { n } | OrderPattern::Hotspot { n, .. } => {
            releases.extend(std::iter::repeat_n(0, n as usize))
        }
        OrderPattern::Wave {
            waves,
            per_wave,
            interval,
        } => {
            for w in 0..waves {
                releases.extend(std::iter::repeat_n(w * interval, per_wave as usize));
            }
        }
        OrderPattern::Burst {
            base_rate,
            burst_rate,
            burst_start,
            burst_len,
            horizon,
        } => {
            for t in 0..horizon {
                let in_burst = t >= burst_start && t < burst_start.saturating_add(burst_len);
                let k = poisson_count(if in_burst { burst_rate } else { base_rate }, &mut rng);
                releases.extend(std::iter::repeat_n(t, k as usize));
            }
        }
        OrderPattern::Steady { rate, horizon } => {
            for t in 0..horizon {
                let k = poisson_count(rate, &mut rng);
                releases.extend(std::iter::repeat_n(t, k as usize));
            }
        }
    }
    if releases.is_empty() {
        return Ok(Vec::new());
    }
    if skus.is_empty() || stations.is_empty() {
        return Err(SimError::EmptyCatalog(format!(
            "{} skus and {} stations for {} orders",
            skus.len(),
            stations.len(),
            releases.len()
        )));
    }

    let zipf = match *pattern {
        OrderPattern::Hotspot { zipf_s, .. } => Some(Zipf::new(skus.len() as f64, zipf_s).expect("validated")),
        _ => None,
    };
    let orders = releases
        .into_iter()
        .enumerate()
        .map(|(i, release_step)| {
            let sku = match &zipf {
                Some(z) => skus[z.sample(&mut rng) as usize - 1].id,
                None => skus[rng.random_range(0..skus.len())].id,
            };
            let station = stations[rng.random_range(0..stations.len())];
            Order {
                id: OrderId(i as u32),
                sku,
                quantity: 1,
                station,
                release_step,
                status: OrderStatus::Pending,
                completed_step: None,
            }
        })
        .collect();
    Ok(orders)
}

/// Live shelf contents, indexed like `Layout::shelves`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inventory {
    pub contents: Vec<BTreeMap<SkuId, u32>>,
}

impl Inventory {
    pub fn from_layout(layout: &Layout) -> Self {
        Self {
            contents: layout.shelves.iter().map(|s| s.contents.clone()).collect(),
        }
    }

    pub fn count(&self, shelf_index: usize, sku: SkuId) -> u32 {
        self.contents[shelf_index].get(&sku).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.contents.iter().flat_map(|c| c.values()).map(|&v| v as u64).sum()
    }

    pub fn take(&mut self, shelf_index: usize, sku: SkuId, quantity: u32) {
        let c = self.contents[shelf_index].get_mut(&sku).expect("sku on shelf");
        assert!(*c >= quantity, "inventory underflow");
        *c -= quantity;
    }
}

/// Why an order could not become a task yet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unfulfillable {
    /// No shelf holds the SKU in the required quantity.
    OutOfStock,
    /// Every holding shelf is in use by another task.
    ShelvesBusy,
}

/// Task for the holding shelf nearest (Manhattan) to the order's station,
/// skipping shelves in `busy`. Ties go to the lowest shelf id.
pub fn decompose_order(
    order: &Order,
    layout: &Layout,
    inventory: &Inventory,
    busy: &BTreeSet<ShelfId>,
    task_id: TaskId,
    now: u32,
) -> Result<Task, Unfulfillable> {
    let station = layout.station(order.station).expect("order station exists");
    let mut any = false;
    let best = layout
        .shelves
        .iter()
        .enumerate()
        .filter(|(i, _)| inventory.count(*i, order.sku) >= order.quantity)
        .inspect(|_| any = true)
        .filter(|(_, s)| !busy.contains(&s.id))
        .min_by_key(|(_, s)| (s.home.manhattan(station.cell), s.id));
    match best {
        Some((_, shelf)) => Ok(Task {
            id: task_id,
            order: order.id,
            shelf: shelf.id,
            station: order.station,
            stage: TaskStage::GoToShelf,
            assigned_agv: None,
            stage_entered: now,
            stage_elapsed: 0,
        }),
        None if any => Err(Unfulfillable::ShelvesBusy),
        None => Err(Unfulfillable::OutOfStock),
    }
}

/// Contract violation: a stage was advanced before its completion condition held.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageError {
    pub task: TaskId,
    pub stage: TaskStage,
    pub reason: &'static str,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task {} cannot leave {}: {}", self.task, self.stage, self.reason)
    }
}

impl std::error::Error for StageError {}

/// Mutable world pieces touched by stage transitions.
pub struct StageContext<'a> {
    pub layout: &'a Layout,
    pub terrain: &'a mut Terrain,
    pub inventory: &'a mut Inventory,
    pub order: &'a mut Order,
}

/// Whether the current stage's completion condition holds.
pub fn stage_complete(task: &Task, agv: &AgvState, layout: &Layout) -> bool {
    if agv.in_flight.is_some() {
        return false;
    }
    let shelf = layout.shelf(task.shelf).expect("task shelf exists");
    match task.stage {
        TaskStage::GoToShelf | TaskStage::ReturnShelf => agv.pose.cell == shelf.home,
        TaskStage::CarryToStation => {
            let st = layout.station(task.station).expect("task station exists");
            agv.pose.cell == layout.station_anchor(st, agv.spec.footprint)
        }
        TaskStage::LiftShelf | TaskStage::DropShelf => task.stage_elapsed >= 1,
        TaskStage::WaitService => {
            let st = layout.station(task.station).expect("task station exists");
            task.stage_elapsed >= st.service_time
        }
        TaskStage::Done => false,
    }
}

/// Move `task` to its next stage at step `now`, applying the side effects:
/// lifting un-stores the shelf, finishing service completes the order and
/// takes inventory, dropping restores the shelf and frees the AGV.
pub fn advance_stage(
    task: &mut Task,
    agv: &mut AgvState,
    ctx: &mut StageContext<'_>,
    now: u32,
) -> Result<TaskStage, StageError> {
    if !stage_complete(task, agv, ctx.layout) {
        return Err(StageError {
            task: task.id,
            stage: task.stage,
            reason: "completion condition does not hold",
        });
    }
    let shelf_index = ctx.layout.shelf_index(task.shelf).expect("task shelf exists");
    match task.stage {
        TaskStage::LiftShelf => {
            agv.carrying = Some(task.shelf);
            ctx.terrain.set_stored(shelf_index, false);
        }
        TaskStage::WaitService => {
            ctx.inventory.take(shelf_index, ctx.order.sku, ctx.order.quantity);
            ctx.order.status = OrderStatus::Completed;
            ctx.order.completed_step = Some(now);
        }
        TaskStage::DropShelf => {
            agv.carrying = None;
            agv.task = None;
            ctx.terrain.set_stored(shelf_index, true);
        }
        _ => {}
    }
    task.stage = task.stage.next().expect("not done");
    task.stage_entered = now;
    task.stage_elapsed = 0;
    Ok(task.stage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Cell, Heading, Pose};
    use crate::world::{load_layout, AgvSpec, AgvStart};

    fn catalog(n: u32) -> Vec<Sku> {
        (0..n)
            .map(|i| Sku {
                id: SkuId(i),
                size_class: 1,
            })
            .collect()
    }

    #[test]
    fn one_shot_releases_everything_at_zero() {
        let o = generate_orders(
            &OrderPattern::OneShot { n: 30 },
            &catalog(4),
            &[StationId(0), StationId(1)],
            7,
        )
        .unwrap();
        assert_eq!(o.len(), 30);
        assert!(o.iter().all(|o| o.release_step == 0 && o.quantity == 1));
        assert_eq!(
            o,
            generate_orders(
                &OrderPattern::OneShot { n: 30 },
                &catalog(4),
                &[StationId(0), StationId(1)],
                7
            )
            .unwrap()
        );
    }

    #[test]
    fn steady_zero_rate_is_empty() {
        let o = generate_orders(
            &OrderPattern::Steady {
                rate: 0.0,
                horizon: 100,
            },
            &[],
            &[],
            0,
        )
        .unwrap();
        assert!(o.is_empty());
    }

    #[test]
    fn empty_catalog_is_an_error_only_when_orders_exist() {
        assert!(matches!(
            generate_orders(&OrderPattern::OneShot { n: 1 }, &[], &[StationId(0)], 0),
            Err(SimError::EmptyCatalog(_))
        ));
        assert!(generate_orders(&OrderPattern::OneShot { n: 0 }, &[], &[], 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn wave_schedule() {
        let p = OrderPattern::Wave {
            waves: 3,
            per_wave: 4,
            interval: 25,
        };
        let o = generate_orders(&p, &catalog(2), &[StationId(0)], 1).unwrap();
        let steps: Vec<u32> = o.iter().map(|o| o.release_step).collect();
        let want: Vec<u32> = [0, 25, 50].iter().flat_map(|&s| [s; 4]).collect();
        assert_eq!(steps, want);
    }

    #[test]
    fn burst_rate_rises_inside_the_window() {
        let p = OrderPattern::Burst {
            base_rate: 0.1,
            burst_rate: 2.0,
            burst_start: 100,
            burst_len: 100,
            horizon: 300,
        };
        let o = generate_orders(&p, &catalog(3), &[StationId(0)], 5).unwrap();
        let inside = o.iter().filter(|o| (100..200).contains(&o.release_step)).count() as f64;
        let outside = o.len() as f64 - inside;
        // Expected 200 vs 20.
        assert!((150.0..250.0).contains(&inside), "{inside}");
        assert!(outside < 45.0, "{outside}");
        assert!(o.windows(2).all(|w| w[0].release_step <= w[1].release_step));
    }

    #[test]
    fn hotspot_rank_ratio_matches_zipf_pmf() {
        let s = 1.0;
        let o = generate_orders(
            &OrderPattern::Hotspot { n: 10_000, zipf_s: s },
            &catalog(10),
            &[StationId(0)],
            11,
        )
        .unwrap();
        let count = |k: u32| o.iter().filter(|o| o.sku == SkuId(k)).count() as f64;
        // pmf(k) ∝ k^-s, so pmf(1)/pmf(2) = 2^s.
        let pmf = |k: f64| k.powf(-s) / (1..=10).map(|j| (j as f64).powf(-s)).sum::<f64>();
        let want = pmf(1.0) / pmf(2.0);
        let got = count(0) / count(1);
        assert!((got - want).abs() <= 0.15, "ratio {got} vs {want}");
    }

    #[test]
    fn bad_zipf_exponent_rejected() {
        let p = OrderPattern::Hotspot { n: 3, zipf_s: 0.0 };
        assert!(generate_orders(&p, &catalog(2), &[StationId(0)], 0).is_err());
    }

    fn two_shelf_layout() -> Layout {
        load_layout(
            r#"{"width":12,"height":6,
            "shelves":[{"id":0,"x":1,"y":1,"size":1,"contents":[{"sku":0,"count":2}]},
                       {"id":1,"x":9,"y":1,"size":1,"contents":[{"sku":0,"count":1},{"sku":1,"count":1}]}],
            "stations":[{"id":0,"x":10,"y":5,"service_time":2}],
            "agvs":[{"id":0,"x":0,"y":0,"heading":"S","footprint":1,"steps_per_cell":1,"turn_cost":0,"kind":"pod"}]}"#,
        )
        .unwrap()
    }

    fn order(sku: u32) -> Order {
        Order {
            id: OrderId(0),
            sku: SkuId(sku),
            quantity: 1,
            station: StationId(0),
            release_step: 0,
            status: OrderStatus::Pending,
            completed_step: None,
        }
    }

    #[test]
    fn decomposition_picks_the_nearest_free_holder() {
        let l = two_shelf_layout();
        let inv = Inventory::from_layout(&l);
        let dist = |i: usize| l.shelves[i].home.manhattan(l.stations[0].cell);
        let brute = (0..2)
            .filter(|&i| inv.count(i, SkuId(0)) >= 1)
            .min_by_key(|&i| dist(i))
            .unwrap();
        let t = decompose_order(&order(0), &l, &inv, &BTreeSet::new(), TaskId(0), 0).unwrap();
        assert_eq!(t.shelf, l.shelves[brute].id);
        assert_eq!(t.stage, TaskStage::GoToShelf);
        let busy = BTreeSet::from([ShelfId(1)]);
        assert_eq!(
            decompose_order(&order(0), &l, &inv, &busy, TaskId(0), 0).unwrap().shelf,
            ShelfId(0)
        );
        assert_eq!(
            decompose_order(&order(1), &l, &inv, &busy, TaskId(0), 0),
            Err(Unfulfillable::ShelvesBusy)
        );
        assert_eq!(
            decompose_order(&order(9), &l, &inv, &busy, TaskId(0), 0),
            Err(Unfulfillable::OutOfStock)
        );
    }

    #[test]
    fn full_stage_cycle() {
        let l = two_shelf_layout();
        let mut terrain = Terrain::new(&l);
        let mut inv = Inventory::from_layout(&l);
        let mut ord = order(1);
        let mut agv = AgvState::new(&AgvStart {
            spec: AgvSpec::unit(0),
            pose: Pose::new(Cell::new(9, 1), Heading::S),
        });
        let mut task = decompose_order(&ord, &l, &inv, &BTreeSet::new(), TaskId(4), 0).unwrap();
        let mut ctx = StageContext {
            layout: &l,
            terrain: &mut terrain,
            inventory: &mut inv,
            order: &mut ord,
        };
        assert_eq!(
            advance_stage(&mut task, &mut agv, &mut ctx, 3).unwrap(),
            TaskStage::LiftShelf
        );
        assert!(advance_stage(&mut task, &mut agv, &mut ctx, 3).is_err());
        task.stage_elapsed = 1;
        assert_eq!(
            advance_stage(&mut task, &mut agv, &mut ctx, 4).unwrap(),
            TaskStage::CarryToStation
        );
        assert_eq!(agv.carrying, Some(ShelfId(1)));
        assert!(ctx.terrain.stored_shelf_at(Cell::new(9, 1)).is_none());
        agv.pose.cell = Cell::new(10, 5);
        assert_eq!(
            advance_stage(&mut task, &mut agv, &mut ctx, 10).unwrap(),
            TaskStage::WaitService
        );
        // Entered at 10 with service time 2: done at 12.
        task.stage_elapsed = 12 - 10;
        let before = ctx.inventory.total();
        assert_eq!(
            advance_stage(&mut task, &mut agv, &mut ctx, 12).unwrap(),
            TaskStage::ReturnShelf
        );
        assert_eq!(ctx.inventory.total(), before - 1);
        assert_eq!(
            (ctx.order.status, ctx.order.completed_step),
            (OrderStatus::Completed, Some(12))
        );
        agv.pose.cell = Cell::new(9, 1);
        assert_eq!(
            advance_stage(&mut task, &mut agv, &mut ctx, 15).unwrap(),
            TaskStage::DropShelf
        );
        task.stage_elapsed = 1;
        agv.task = Some(task.id);
        assert_eq!(
            advance_stage(&mut task, &mut agv, &mut ctx, 16).unwrap(),
            TaskStage::Done
        );
        assert_eq!((agv.carrying, agv.task), (None, None));
        assert!(ctx.terrain.stored_shelf_at(Cell::new(9, 1)).is_some());
    }

    #[test]
    fn stage_sequence_is_linear() {
        let mut s = TaskStage::GoToShelf;
        let mut seen = vec![s];
        while let Some(n) = s.next() {
            assert!(n > s);
            seen.push(n);
            s = n;
        }
        assert_eq!(seen, TaskStage::SEQUENCE);
    }
}
