//! Grid geometry shared by every layer: cells, headings, footprints and
//! axis-aligned cell rectangles.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A grid cell. `y = 0` is the north boundary; `y` grows southwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    pub fn step(self, dir: Heading) -> Cell {
        let (dx, dy) = dir.delta();
        Cell::new(self.x + dx, self.y + dy)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Cardinal heading. Diagonal motion is not modelled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }

    pub fn cw(self) -> Heading {
        match self {
            Heading::N => Heading::E,
            Heading::E => Heading::S,
            Heading::S => Heading::W,
            Heading::W => Heading::N,
        }
    }

    pub fn ccw(self) -> Heading {
        match self {
            Heading::N => Heading::W,
            Heading::W => Heading::S,
            Heading::S => Heading::E,
            Heading::E => Heading::N,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Heading in quarter turns clockwise from north.
    pub fn quarter_turns(self) -> f64 {
        self.index() as f64
    }

    /// Number of 90° rotations separating two headings (0, 1 or 2).
    pub fn turns_to(self, other: Heading) -> u32 {
        let d = (other.index() as i32 - self.index() as i32).rem_euclid(4);
        if d == 3 {
            1
        } else {
            d as u32
        }
    }

    pub fn from_delta(dx: i32, dy: i32) -> Option<Heading> {
        match (dx, dy) {
            (0, -1) => Some(Heading::N),
            (1, 0) => Some(Heading::E),
            (0, 1) => Some(Heading::S),
            (-1, 0) => Some(Heading::W),
            _ => None,
        }
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Heading::N => "N",
            Heading::E => "E",
            Heading::S => "S",
            Heading::W => "W",
        };
        f.write_str(s)
    }
}

/// Anchor cell plus heading.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub cell: Cell,
    pub heading: Heading,
}

impl Pose {
    pub const fn new(cell: Cell, heading: Heading) -> Self {
        Self { cell, heading }
    }
}

/// Half-open rectangle of cells `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub fn footprint(anchor: Cell, size: u8) -> Rect {
        let s = i32::from(size);
        Rect {
            x0: anchor.x,
            y0: anchor.y,
            x1: anchor.x + s,
            y1: anchor.y + s,
        }
    }

    pub fn cell(c: Cell) -> Rect {
        Rect::footprint(c, 1)
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= self.x0 && c.x < self.x1 && c.y >= self.y0 && c.y < self.y1
    }

    /// Bounding rectangle of both.
    pub fn union(&self, o: &Rect) -> Rect {
        Rect {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }

    pub fn intersection(&self, o: &Rect) -> Option<Rect> {
        if !self.intersects(o) {
            return None;
        }
        Some(Rect {
            x0: self.x0.max(o.x0),
            y0: self.y0.max(o.y0),
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
        })
    }

    pub fn dilate(&self, by: i32) -> Rect {
        Rect {
            x0: self.x0 - by,
            y0: self.y0 - by,
            x1: self.x1 + by,
            y1: self.y1 + by,
        }
    }

    pub fn clip(&self, width: i32, height: i32) -> Rect {
        Rect {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(width),
            y1: self.y1.min(height),
        }
    }

    pub fn within(&self, width: i32, height: i32) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x1 <= width && self.y1 <= height
    }

    /// Cells in row-major order (y, then x).
    pub fn cells(self) -> impl Iterator<Item = Cell> {
        let Rect { x0, y0, x1, y1 } = self;
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| Cell::new(x, y)))
    }

    pub fn area(&self) -> i32 {
        (self.x1 - self.x0).max(0) * (self.y1 - self.y0).max(0)
    }
}

/// The `footprint × footprint` block of cells whose minimum corner is `anchor`.
/// Bounds are the caller's concern.
pub fn footprint_cells(anchor: Cell, footprint: u8) -> Vec<Cell> {
    Rect::footprint(anchor, footprint).cells().collect()
}
