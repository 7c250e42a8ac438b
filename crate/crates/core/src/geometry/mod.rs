//! Point-cloud kernels: labeled points, voxel filtering, farthest point
//! sampling, nearest-neighbor grouping, and PLY serialization.
//!
//! Everything in this module is a pure function of its inputs.

mod ply;
mod sampling;
mod voxel;

pub use ply::{load_ply, read_ply, save_ply, write_ply};
pub use sampling::{
    farthest_point_sample, knn_group, validate_embedding_config, EmbeddingGeometry,
    EmbeddingVerdict,
};
pub use voxel::{merge_observation, voxel_downsample, LabeledPointCloud, VoxelKey, VoxelSizes};

use serde::{Deserialize, Serialize};

/// Cartesian coordinates in cell units.
pub type Vec3 = [f64; 3];

#[inline]
pub fn squared_distance(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Ground-truth class of a measured point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Wall,
    Floor,
    Target,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Wall, Label::Floor, Label::Target];

    /// Stable small-integer code used in files and one-hot encodings.
    pub fn code(self) -> u8 {
        match self {
            Label::Wall => 0,
            Label::Floor => 1,
            Label::Target => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Label::Wall),
            1 => Some(Label::Floor),
            2 => Some(Label::Target),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    pub position: Vec3,
    pub label: Label,
}

impl LabeledPoint {
    pub fn new(position: Vec3, label: Label) -> Self {
        Self { position, label }
    }
}

/// Per-class point counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub wall: usize,
    pub floor: usize,
    pub target: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.wall + self.floor + self.target
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Wall => self.wall,
            Label::Floor => self.floor,
            Label::Target => self.target,
        }
    }

    pub(crate) fn bump(&mut self, label: Label) {
        match label {
            Label::Wall => self.wall += 1,
            Label::Floor => self.floor += 1,
            Label::Target => self.target += 1,
        }
    }

    pub fn of(points: &[LabeledPoint]) -> Self {
        let mut c = Self::default();
        points.iter().for_each(|p| c.bump(p.label));
        c
    }
}
