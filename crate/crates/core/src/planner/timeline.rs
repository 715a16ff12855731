//! Per-step occupancy of an agent over time, and the reservation table built
//! from the timelines of agents that are not being planned.

use serde::{Deserialize, Serialize};

use crate::geom::{Cell, Heading, Rect};
use crate::world::AgvId;

use super::{Action, TimedPath};

/// Constant velocity of a translation: one cell in `(dx, dy)` every `steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Motion {
    pub dx: i8,
    pub dy: i8,
    pub steps: u16,
}

impl Motion {
    pub fn new(dir: Heading, steps: u32) -> Self {
        let (dx, dy) = dir.delta();
        Motion {
            dx: dx as i8,
            dy: dy as i8,
            steps: steps as u16,
        }
    }
}

/// Whether two agents moving `a_from → a_to` and `b_from → b_to` over one
/// step window collide. Two agents collide in a window when their swept
/// rectangles overlap, unless both translate with the same velocity (their
/// relative position is then constant and already checked at the window start).
pub fn window_collides(
    a_from: Rect,
    a_to: Rect,
    a_motion: Option<Motion>,
    b_from: Rect,
    b_to: Rect,
    b_motion: Option<Motion>,
) -> bool {
    if a_to.intersects(&b_to) {
        return true;
    }
    if a_motion.is_some() && a_motion == b_motion {
        return false;
    }
    a_from.union(&a_to).intersects(&b_from.union(&b_to))
}

/// Occupancy rectangle per integer step starting at `start`; after the last
/// entry the agent stays put. A finite `until` makes the timeline vanish from
/// that step on (used for agents expected to yield).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Timeline {
    pub agv: AgvId,
    pub start: u32,
    occ: Vec<Rect>,
    motion: Vec<Option<Motion>>,
    pub until: u32,
}

impl Timeline {
    pub fn stationary(agv: AgvId, rect: Rect, start: u32) -> Self {
        Self {
            agv,
            start,
            occ: vec![rect],
            motion: Vec::new(),
            until: u32::MAX,
        }
    }

    pub fn from_path(path: &TimedPath, footprint: u8) -> Self {
        let first = &path.states[0];
        let mut tl = Timeline::stationary(path.agv, Rect::footprint(first.cell, footprint), first.step);
        for (i, action) in path.actions.iter().enumerate() {
            let (s, e) = (&path.states[i], &path.states[i + 1]);
            let dur = e.step - s.step;
            match action {
                Action::Move(d) => tl.push_translate(Rect::footprint(e.cell, footprint), *d, dur),
                _ => tl.push_stay(dur),
            }
        }
        tl
    }

    pub fn with_until(mut self, until: u32) -> Self {
        self.until = until;
        self
    }

    /// Step of the last explicit entry.
    pub fn end(&self) -> u32 {
        self.start + self.occ.len() as u32 - 1
    }

    pub fn last_rect(&self) -> Rect {
        *self.occ.last().expect("timeline is never empty")
    }

    pub fn push_stay(&mut self, steps: u32) {
        let r = self.last_rect();
        for _ in 0..steps {
            self.occ.push(r);
            self.motion.push(None);
        }
    }

    /// Translate into `dst` over `steps` steps; both cells are held while
    /// the move is in progress.
    pub fn push_translate(&mut self, dst: Rect, dir: Heading, steps: u32) {
        let both = self.last_rect().union(&dst);
        let m = Some(Motion::new(dir, steps));
        for j in 0..steps {
            self.occ.push(if j + 1 == steps { dst } else { both });
            self.motion.push(m);
        }
    }

    /// Continue a translation that is already `done` steps in.
    pub fn push_translate_rest(&mut self, src: Rect, dst: Rect, dir: Heading, steps: u32, done: u32) {
        let both = src.union(&dst);
        let m = Some(Motion::new(dir, steps));
        for j in done..steps {
            self.occ.push(if j + 1 == steps { dst } else { both });
            self.motion.push(m);
        }
    }

    /// Replace the first entry (used when the agent is already mid-move).
    pub fn set_first(&mut self, rect: Rect) {
        self.occ[0] = rect;
    }

    pub fn present(&self, t: u32) -> bool {
        t < self.until
    }

    pub fn occ_at(&self, t: u32) -> Option<Rect> {
        if t >= self.until {
            return None;
        }
        let i = t.saturating_sub(self.start) as usize;
        Some(*self.occ.get(i).unwrap_or_else(|| self.occ.last().unwrap()))
    }

    pub fn motion_at(&self, t: u32) -> Option<Motion> {
        if t < self.start {
            return None;
        }
        self.motion.get((t - self.start) as usize).copied().flatten()
    }

    /// Whether the window `t → t+1` of this timeline collides with the given motion.
    pub fn collides(&self, t: u32, from: Rect, to: Rect, motion: Option<Motion>) -> bool {
        if !self.present(t + 1) {
            return false;
        }
        let b_from = self.occ_at(t).unwrap();
        let b_to = self.occ_at(t + 1).unwrap();
        window_collides(from, to, motion, b_from, b_to, self.motion_at(t))
    }

    /// Last step at which this timeline overlaps `rect`.
    pub fn last_use(&self, rect: &Rect) -> LastUse {
        if self.last_rect().intersects(rect) {
            if self.until == u32::MAX {
                return LastUse::Forever;
            }
            return LastUse::At(self.until - 1);
        }
        let limit = self.until.saturating_sub(self.start) as usize;
        for i in (0..self.occ.len().min(limit)).rev() {
            if self.occ[i].intersects(rect) {
                return LastUse::At(self.start + i as u32);
            }
        }
        LastUse::Never
    }

    /// Occupied rectangles for steps `start..=end`.
    pub fn rects(&self) -> &[Rect] {
        &self.occ
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LastUse {
    Never,
    At(u32),
    Forever,
}

/// Timelines of every agent a search must avoid.
#[derive(Clone, Debug, Default)]
pub struct ReservationTable {
    timelines: Vec<Timeline>,
}

impl ReservationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_timelines(timelines: Vec<Timeline>) -> Self {
        Self { timelines }
    }

    pub fn push(&mut self, tl: Timeline) {
        self.timelines.push(tl);
    }

    pub fn remove(&mut self, agv: AgvId) {
        self.timelines.retain(|t| t.agv != agv);
    }

    pub fn timelines(&self) -> &[Timeline] {
        &self.timelines
    }

    pub fn len(&self) -> usize {
        self.timelines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timelines.is_empty()
    }

    /// True when the window `t → t+1` is reserved by some other agent.
    pub fn blocks(&self, me: AgvId, t: u32, from: Rect, to: Rect, motion: Option<Motion>) -> bool {
        self.timelines
            .iter()
            .any(|tl| tl.agv != me && tl.collides(t, from, to, motion))
    }

    /// First step from which `rect` stays free of every other agent forever,
    /// or `None` when some agent holds it indefinitely.
    pub fn free_from(&self, me: AgvId, rect: &Rect) -> Option<u32> {
        let mut ready = 0;
        for tl in self.timelines.iter().filter(|t| t.agv != me) {
            match tl.last_use(rect) {
                LastUse::Never => {}
                LastUse::At(t) => ready = ready.max(t + 1),
                LastUse::Forever => return None,
            }
        }
        Some(ready)
    }
}

/// Cells blocked by active safety corridors: a cell is blocked at step `t`
/// while `t < until`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blocked {
    width: i32,
    until: Vec<u32>,
    any: bool,
}

impl Blocked {
    pub fn none(width: i32, height: i32) -> Self {
        Self {
            width,
            until: vec![0; (width.max(0) * height.max(0)) as usize],
            any: false,
        }
    }

    pub fn add(&mut self, cell: Cell, until: u32) {
        let i = (cell.y * self.width + cell.x) as usize;
        self.until[i] = self.until[i].max(until);
        self.any = true;
    }

    pub fn is_blocked(&self, c: Cell, t: u32) -> bool {
        self.any && t < self.until[(c.y * self.width + c.x) as usize]
    }

    pub fn blocked_until(&self, c: Cell) -> u32 {
        self.until[(c.y * self.width + c.x) as usize]
    }

    pub fn any(&self) -> bool {
        self.any
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::planner::PathState;

    fn unit(x: i32, y: i32) -> Rect {
        Rect::cell(Cell::new(x, y))
    }

    #[test]
    fn following_in_line_is_allowed_but_perpendicular_is_not() {
        let e = Some(Motion::new(Heading::E, 1));
        let s = Some(Motion::new(Heading::S, 1));
        // A (0,0)→(1,0) behind B (1,0)→(2,0).
        assert!(!window_collides(unit(0, 0), unit(1, 0), e, unit(1, 0), unit(2, 0), e));
        // B turns away southwards instead.
        assert!(window_collides(unit(0, 0), unit(1, 0), e, unit(1, 0), unit(1, 1), s));
        // Swap.
        let w = Some(Motion::new(Heading::W, 1));
        assert!(window_collides(unit(0, 0), unit(1, 0), e, unit(1, 0), unit(0, 0), w));
        // Parallel lanes.
        assert!(!window_collides(unit(0, 0), unit(1, 0), e, unit(0, 1), unit(1, 1), e));
    }

    #[test]
    fn slow_moves_hold_both_cells() {
        let path = TimedPath {
            agv: AgvId(0),
            states: vec![
                PathState::new(Pose::new(Cell::new(0, 0), Heading::E), 0),
                PathState::new(Pose::new(Cell::new(1, 0), Heading::E), 3),
            ],
            actions: vec![Action::Move(Heading::E)],
        };
        let tl = Timeline::from_path(&path, 1);
        assert_eq!(tl.occ_at(0), Some(unit(0, 0)));
        assert_eq!(tl.occ_at(1).unwrap().area(), 2);
        assert_eq!(tl.occ_at(2).unwrap().area(), 2);
        assert_eq!(tl.occ_at(3), Some(unit(1, 0)));
        assert_eq!(tl.occ_at(50), Some(unit(1, 0)));
        assert_eq!(tl.last_use(&unit(0, 0)), LastUse::At(2));
        assert_eq!(tl.last_use(&unit(1, 0)), LastUse::Forever);
    }

    #[test]
    fn soft_timelines_vanish() {
        let tl = Timeline::stationary(AgvId(1), unit(2, 2), 5).with_until(7);
        assert!(tl.occ_at(6).is_some());
        assert!(tl.occ_at(7).is_none());
        let table = ReservationTable::from_timelines(vec![tl]);
        assert_eq!(table.free_from(AgvId(0), &unit(2, 2)), Some(7));
        assert_eq!(table.free_from(AgvId(1), &unit(2, 2)), Some(0));
    }
}
