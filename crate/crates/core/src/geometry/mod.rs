//! Normalized rectangle arithmetic and the static grid layouts.
//!
//! All coordinates are fractions of the frame: origin top-left, x to the right,
//! y downward, everything inside `[0, 1]`.

mod perturb;

pub use perturb::{
    draw_index_for, normalize_sigma_area, perturb_box, PerturbationDraw, PerturbationSpec, MIN_SIDE,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}]: need x1 < x2 and y1 < y2")]
    Degenerate { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box [{x1}, {y1}, {x2}, {y2}] lies outside the frame")]
    OutOfFrame { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("non-finite box coordinate")]
    NonFinite,
    #[error("enlargement {value} out of range [0, {limit}) for {layout}")]
    Enlargement {
        value: f64,
        limit: f64,
        layout: LayoutKind,
    },
    #[error("unknown layout {0:?}")]
    UnknownLayout(String),
    #[error("unknown selection mode {0:?}")]
    UnknownSelection(String),
    #[error("invalid box literal {0:?}: expected x1,y1,x2,y2")]
    BoxLiteral(String),
}

/// Axis-aligned rectangle in normalized frame coordinates with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub const FULL_FRAME: Rect = Rect {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::Degenerate { x1, y1, x2, y2 });
        }
        if x1 < 0.0 || y1 < 0.0 || x2 > 1.0 || y2 > 1.0 {
            return Err(GeometryError::OutOfFrame { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Converts a pixel box into frame fractions.
    pub fn from_pixels(
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let (w, h) = (f64::from(width), f64::from(height));
        Self::new(x1 / w, y1 / h, x2 / w, y2 / h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Area of the intersection; zero when the interiors are disjoint.
    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Parses `x1,y1,x2,y2`.
impl FromStr for Rect {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| GeometryError::BoxLiteral(s.to_string()))?;
        match parts.as_slice() {
            [x1, y1, x2, y2] => Rect::new(*x1, *y1, *x2, *y2),
            _ => Err(GeometryError::BoxLiteral(s.to_string())),
        }
    }
}

impl<'de> Deserialize<'de> for Rect {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Array([f64; 4]),
            Fields { x1: f64, y1: f64, x2: f64, y2: f64 },
        }
        let [x1, y1, x2, y2] = match Repr::deserialize(deserializer)? {
            Repr::Array(a) => a,
            Repr::Fields { x1, y1, x2, y2 } => [x1, y1, x2, y2],
        };
        Rect::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, zero iff interiors are disjoint.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayoutKind {
    #[serde(rename = "static5")]
    Static5,
    #[serde(rename = "static9")]
    Static9,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 2] = [LayoutKind::Static5, LayoutKind::Static9];

    pub fn name(self) -> &'static str {
        match self {
            LayoutKind::Static5 => "static5",
            LayoutKind::Static9 => "static9",
        }
    }

    /// Exclusive upper bound on the enlargement that keeps every cell in frame.
    pub fn max_enlargement(self) -> f64 {
        match self {
            LayoutKind::Static5 => 0.5,
            LayoutKind::Static9 => 2.0 / 3.0,
        }
    }

    /// Width and height of a base (unenlarged) cell.
    pub fn base_cell_size(self) -> f64 {
        match self {
            LayoutKind::Static5 => 0.5,
            LayoutKind::Static9 => 1.0 / 3.0,
        }
    }
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayoutKind {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "static5" => Ok(LayoutKind::Static5),
            "static9" => Ok(LayoutKind::Static9),
            _ => Err(GeometryError::UnknownLayout(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub id: String,
    pub rect: Rect,
}

/// An ordered set of named cells covering the frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridLayout {
    pub kind: LayoutKind,
    pub enlargement: f64,
    pub cells: Vec<GridCell>,
}

pub const STATIC5_CELL_IDS: [&str; 5] = [
    "top-left",
    "top-right",
    "bottom-left",
    "bottom-right",
    "center",
];

fn cell(id: impl Into<String>, x1: f64, y1: f64, x2: f64, y2: f64) -> GridCell {
    GridCell {
        id: id.into(),
        rect: Rect { x1, y1, x2, y2 },
    }
}

impl GridLayout {
    pub fn build(kind: LayoutKind) -> Self {
        let cells = match kind {
            LayoutKind::Static9 => {
                let mut cells = Vec::with_capacity(9);
                for row in 1..=3u32 {
                    for col in 1..=3u32 {
                        cells.push(cell(
                            format!("r{row}c{col}"),
                            f64::from(col - 1) / 3.0,
                            f64::from(row - 1) / 3.0,
                            f64::from(col) / 3.0,
                            f64::from(row) / 3.0,
                        ));
                    }
                }
                cells
            }
            LayoutKind::Static5 => vec![
                cell(STATIC5_CELL_IDS[0], 0.0, 0.0, 0.5, 0.5),
                cell(STATIC5_CELL_IDS[1], 0.5, 0.0, 1.0, 0.5),
                cell(STATIC5_CELL_IDS[2], 0.0, 0.5, 0.5, 1.0),
                cell(STATIC5_CELL_IDS[3], 0.5, 0.5, 1.0, 1.0),
                cell(STATIC5_CELL_IDS[4], 0.25, 0.25, 0.75, 0.75),
            ],
        };
        Self {
            kind,
            enlargement: 0.0,
            cells,
        }
    }

    /// Base layout enlarged by `enlargement` in one step.
    pub fn build_enlarged(kind: LayoutKind, enlargement: f64) -> Result<Self, GeometryError> {
        Self::build(kind).enlarge(enlargement)
    }

    /// Grows every cell by `e` in width and in height.
    ///
    /// Per axis, a cell touching one frame border grows inward by `e`; an interior
    /// cell grows by `e / 2` on both sides. Enlargements accumulate, and the total
    /// must stay below [`LayoutKind::max_enlargement`].
    pub fn enlarge(&self, e: f64) -> Result<Self, GeometryError> {
        let total = self.enlargement + e;
        let limit = self.kind.max_enlargement();
        if !e.is_finite() || e < 0.0 || total >= limit {
            return Err(GeometryError::Enlargement {
                value: e,
                limit: limit - self.enlargement,
                layout: self.kind,
            });
        }
        if e == 0.0 {
            return Ok(self.clone());
        }
        let cells = self
            .cells
            .iter()
            .map(|c| {
                let (x1, x2) = grow_axis(c.rect.x1, c.rect.x2, e);
                let (y1, y2) = grow_axis(c.rect.y1, c.rect.y2, e);
                cell(c.id.clone(), x1, y1, x2, y2)
            })
            .collect();
        Ok(Self {
            kind: self.kind,
            enlargement: total,
            cells,
        })
    }

    /// Identifier of the embedding region set this layout produces, e.g. `static9@e=0.1`.
    pub fn region_set_id(&self) -> String {
        RegionSet::Grid {
            kind: self.kind,
            enlargement: self.enlargement,
        }
        .id()
    }

    pub fn cell_ids(&self) -> impl Iterator<Item = &str> {
        self.cells.iter().map(|c| c.id.as_str())
    }

    pub fn cell(&self, id: &str) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.id == id)
    }
}

fn grow_axis(lo: f64, hi: f64, e: f64) -> (f64, f64) {
    match (lo <= 0.0, hi >= 1.0) {
        (true, true) => (lo, hi),
        (true, false) => (lo, hi + e),
        (false, true) => (lo - e, hi),
        (false, false) => (lo - e / 2.0, hi + e / 2.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Every cell with IoU > 0.
    #[default]
    AnyOverlap,
    /// The single highest-IoU cell; ties go to the earlier cell.
    ArgmaxIou,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::AnyOverlap => "any_overlap",
            SelectionMode::ArgmaxIou => "argmax_iou",
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMode {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "any_overlap" | "any" => Ok(SelectionMode::AnyOverlap),
            "argmax_iou" | "argmax" => Ok(SelectionMode::ArgmaxIou),
            _ => Err(GeometryError::UnknownSelection(s.to_string())),
        }
    }
}

/// Indices (into `grid.cells`) of the cells a query box activates. Never empty for a
/// valid box.
pub fn select_cell_indices(grid: &GridLayout, b: &Rect, mode: SelectionMode) -> Vec<usize> {
    match mode {
        SelectionMode::AnyOverlap => grid
            .cells
            .iter()
            .enumerate()
            .filter(|(_, c)| iou(&c.rect, b) > 0.0)
            .map(|(i, _)| i)
            .collect(),
        SelectionMode::ArgmaxIou => {
            let mut best = 0;
            let mut best_iou = f64::NEG_INFINITY;
            for (i, c) in grid.cells.iter().enumerate() {
                let v = iou(&c.rect, b);
                if v > best_iou {
                    best = i;
                    best_iou = v;
                }
            }
            vec![best]
        }
    }
}

pub fn select_cells(grid: &GridLayout, b: &Rect, mode: SelectionMode) -> Vec<String> {
    select_cell_indices(grid, b, mode)
        .into_iter()
        .map(|i| grid.cells[i].id.clone())
        .collect()
}

/// Which family of embedded regions a store holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegionSet {
    Whole,
    Grid { kind: LayoutKind, enlargement: f64 },
}

pub const WHOLE_CELL_ID: &str = "whole";

impl RegionSet {
    pub fn id(&self) -> String {
        match self {
            RegionSet::Whole => "whole".to_string(),
            RegionSet::Grid { kind, enlargement } if *enlargement == 0.0 => kind.name().to_string(),
            RegionSet::Grid { kind, enlargement } => format!("{}@e={}", kind.name(), enlargement),
        }
    }

    pub fn grid(&self) -> Option<Result<GridLayout, GeometryError>> {
        match self {
            RegionSet::Whole => None,
            RegionSet::Grid { kind, enlargement } => {
                Some(GridLayout::build_enlarged(*kind, *enlargement))
            }
        }
    }

    /// `(cell id, rect)` pairs in store order.
    pub fn regions(&self) -> Result<Vec<GridCell>, GeometryError> {
        match self.grid() {
            None => Ok(vec![GridCell {
                id: WHOLE_CELL_ID.to_string(),
                rect: Rect::FULL_FRAME,
            }]),
            Some(grid) => Ok(grid?.cells),
        }
    }
}

impl FromStr for RegionSet {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "whole" {
            return Ok(RegionSet::Whole);
        }
        let (kind, enlargement) = match s.split_once("@e=") {
            Some((k, e)) => (
                k.parse::<LayoutKind>()?,
                e.parse::<f64>()
                    .map_err(|_| GeometryError::UnknownLayout(s.to_string()))?,
            ),
            None => (s.parse::<LayoutKind>()?, 0.0),
        };
        if !(0.0..kind.max_enlargement()).contains(&enlargement) {
            return Err(GeometryError::Enlargement {
                value: enlargement,
                limit: kind.max_enlargement(),
                layout: kind,
            });
        }
        Ok(RegionSet::Grid { kind, enlargement })
    }
}

impl fmt::Display for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}
