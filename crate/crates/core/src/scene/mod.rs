//! Synthetic driving scenes standing in for a perception stack.
//!
//! Everything is expressed in the ego frame at planning time: the ego sits at
//! the origin facing +x.

mod bev;
mod generate;
mod io;
mod route;

pub use bev::{bev_tokens, GENERATOR_VERSION};
pub use generate::{generate_dataset, generate_scene, SceneGenerator};
pub use io::{dataset_bytes, load_dataset, parse_dataset, save_dataset};
pub use route::Route;

use serde::{Deserialize, Serialize};

use crate::config::HORIZON;
use crate::geometry::{OrientedBox, Vec2};

/// Cells per side of the semantic map.
pub const GRID: usize = 32;
/// Cell edge length, m.
pub const CELL: f64 = 2.0;
/// Lower x edge of the map, m. The map covers `[MAP_X0, MAP_X0 + 64)`.
pub const MAP_X0: f64 = -16.0;
/// Lower y edge of the map, m. The map covers `[MAP_Y0, MAP_Y0 + 64)`.
pub const MAP_Y0: f64 = -32.0;
pub const NUM_CLASSES: usize = 4;
/// Ego footprint half-extents (4.5 m × 2.0 m).
pub const EGO_HALF: Vec2 = Vec2::new(2.25, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    Left,
    Straight,
    Right,
    Unknown,
}

impl Command {
    pub const ALL: [Command; 4] = [Command::Left, Command::Straight, Command::Right, Command::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// What the expert driver actually does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Behavior {
    Straight,
    Left,
    Right,
}

impl Behavior {
    pub const ALL: [Behavior; 3] = [Behavior::Straight, Behavior::Left, Behavior::Right];

    pub fn command(self) -> Command {
        match self {
            Behavior::Straight => Command::Straight,
            Behavior::Left => Command::Left,
            Behavior::Right => Command::Right,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    Straight,
    LeftTurn,
    RightTurn,
    Intersection,
    Roundabout,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::LeftTurn,
        ScenarioKind::RightTurn,
        ScenarioKind::Intersection,
        ScenarioKind::Roundabout,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::LeftTurn => "left-turn",
            ScenarioKind::RightTurn => "right-turn",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Roundabout => "roundabout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellClass {
    Drivable = 0,
    NonDrivable = 1,
    Agent = 2,
    Route = 3,
}

impl CellClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(CellClass::Drivable),
            1 => Some(CellClass::NonDrivable),
            2 => Some(CellClass::Agent),
            3 => Some(CellClass::Route),
            _ => None,
        }
    }

    /// Agents occupy road surface, so their cells count as drivable.
    pub fn is_drivable(self) -> bool {
        self != CellClass::NonDrivable
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub command: Command,
    pub velocity: Vec2,
    pub acceleration: Vec2,
}

impl EgoState {
    /// Command one-hot, velocity, acceleration.
    pub fn features(&self) -> [f64; 8] {
        let mut f = [0.0; 8];
        f[self.command.index()] = 1.0;
        f[4] = self.velocity.x;
        f[5] = self.velocity.y;
        f[6] = self.acceleration.x;
        f[7] = self.acceleration.y;
        f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub position: Vec2,
    pub velocity: Vec2,
    pub half_extents: Vec2,
    pub heading: f64,
}

impl Agent {
    /// Footprint after `t` seconds of constant-velocity motion.
    pub fn footprint_at(&self, t: f64) -> OrientedBox {
        OrientedBox::new(self.position + self.velocity * t, self.half_extents, self.heading)
    }
}

/// Row-major class grid; row `r` spans `y ∈ [MAP_Y0 + r·CELL, MAP_Y0 + (r+1)·CELL)`
/// and column `c` spans `x ∈ [MAP_X0 + c·CELL, MAP_X0 + (c+1)·CELL)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticMap {
    cells: Vec<CellClass>,
}

impl SemanticMap {
    pub fn filled(class: CellClass) -> Self {
        Self {
            cells: vec![class; GRID * GRID],
        }
    }

    pub fn from_cells(cells: Vec<CellClass>) -> Option<Self> {
        (cells.len() == GRID * GRID).then_some(Self { cells })
    }

    pub fn cells(&self) -> &[CellClass] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> CellClass {
        self.cells[row * GRID + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: CellClass) {
        self.cells[row * GRID + col] = class;
    }

    /// `(row, col)` of the cell containing `p`, or `None` outside the map.
    pub fn cell_of(p: Vec2) -> Option<(usize, usize)> {
        let c = ((p.x - MAP_X0) / CELL).floor();
        let r = ((p.y - MAP_Y0) / CELL).floor();
        let n = GRID as f64;
        (c >= 0.0 && c < n && r >= 0.0 && r < n).then_some((r as usize, c as usize))
    }

    pub fn cell_center(row: usize, col: usize) -> Vec2 {
        Vec2::new(
            MAP_X0 + (col as f64 + 0.5) * CELL,
            MAP_Y0 + (row as f64 + 0.5) * CELL,
        )
    }

    /// Class at `p`; `None` outside the map.
    pub fn class_at(&self, p: Vec2) -> Option<CellClass> {
        Self::cell_of(p).map(|(r, c)| self.get(r, c))
    }
}

/// Pose at one planning step: position in m, heading in rad.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Waypoint {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

pub type Trajectory = [Waypoint; HORIZON];

pub fn trajectory_from_flat(v: &[f64]) -> Trajectory {
    assert_eq!(v.len(), HORIZON * 3, "trajectory needs {} values", HORIZON * 3);
    std::array::from_fn(|i| Waypoint {
        x: v[3 * i],
        y: v[3 * i + 1],
        heading: v[3 * i + 2],
    })
}

pub fn trajectory_to_flat(t: &Trajectory) -> Vec<f64> {
    t.iter().flat_map(|w| [w.x, w.y, w.heading]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub kind: ScenarioKind,
    pub behavior: Behavior,
    pub command_mismatch: bool,
    pub ego: EgoState,
    /// `c_bev × d_feat`, row-major.
    pub bev_tokens: Vec<f64>,
    pub semantic_map: SemanticMap,
    pub agents: Vec<Agent>,
    pub route: Vec<Vec2>,
    pub gt: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub version: String,
    pub seed: u64,
    pub d_feat: usize,
    pub c_bev: usize,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn kind_histogram(&self) -> [usize; 5] {
        let mut h = [0; 5];
        for s in &self.scenes {
            h[s.kind.index()] += 1;
        }
        h
    }

    pub fn behavior_histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for s in &self.scenes {
            h[s.behavior.index()] += 1;
        }
        h
    }

    pub fn mismatch_count(&self) -> usize {
        self.scenes.iter().filter(|s| s.command_mismatch).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_are_half_open() {
        assert_eq!(SemanticMap::cell_of(Vec2::new(MAP_X0, MAP_Y0)), Some((0, 0)));
        assert_eq!(SemanticMap::cell_of(Vec2::new(MAP_X0 + CELL, MAP_Y0)), Some((0, 1)));
        assert_eq!(SemanticMap::cell_of(Vec2::new(MAP_X0 + CELL - 1e-9, MAP_Y0)), Some((0, 0)));
        assert_eq!(SemanticMap::cell_of(Vec2::new(MAP_X0 + 64.0, 0.0)), None);
        assert_eq!(SemanticMap::cell_of(Vec2::new(MAP_X0 - 1e-9, 0.0)), None);
        assert_eq!(SemanticMap::cell_of(Vec2::new(0.0, 0.0)), Some((16, 8)));
    }

    #[test]
    fn ego_features_one_hot() {
        let e = EgoState {
            command: Command::Right,
            velocity: Vec2::new(5.0, 0.1),
            acceleration: Vec2::new(-1.0, 0.0),
        };
        assert_eq!(e.features(), [0.0, 0.0, 1.0, 0.0, 5.0, 0.1, -1.0, 0.0]);
    }
}
