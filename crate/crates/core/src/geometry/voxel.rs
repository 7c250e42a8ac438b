use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ClassCounts, Label, LabeledPoint, Vec3};
use crate::error::{Error, Result};

/// Edge lengths of the two voxel filters, in cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelSizes {
    background: f64,
    target: f64,
}

impl VoxelSizes {
    pub fn new(background: f64, target: f64) -> Result<Self> {
        for (name, v) in [("background", background), ("target", target)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} voxel size must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self { background, target })
    }

    pub fn background(&self) -> f64 {
        self.background
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn for_label(&self, label: Label) -> f64 {
        match label {
            Label::Target => self.target,
            Label::Wall | Label::Floor => self.background,
        }
    }

    pub fn key(&self, p: &LabeledPoint) -> VoxelKey {
        VoxelKey::of(&p.position, self.for_label(p.label))
    }
}

impl Default for VoxelSizes {
    fn default() -> Self {
        Self {
            background: 0.88,
            target: 0.22,
        }
    }
}

/// Integer voxel coordinates: `floor(coordinate / size)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey(pub [i64; 3]);

impl VoxelKey {
    pub fn of(position: &Vec3, size: f64) -> Self {
        VoxelKey(position.map(|c| (c / size).floor() as i64))
    }
}

/// A voxel-filtered cloud: at most one point per `(class, voxel)`.
///
/// The first point inserted into a voxel is kept; later points landing in an
/// occupied voxel are discarded. Counts therefore never decrease.
#[derive(Clone, Debug)]
pub struct LabeledPointCloud {
    sizes: VoxelSizes,
    points: Vec<LabeledPoint>,
    occupancy: HashMap<(Label, VoxelKey), usize>,
    counts: ClassCounts,
}

impl PartialEq for LabeledPointCloud {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes && self.points == other.points
    }
}

impl LabeledPointCloud {
    pub fn new(sizes: VoxelSizes) -> Self {
        Self {
            sizes,
            points: Vec::new(),
            occupancy: HashMap::new(),
            counts: ClassCounts::default(),
        }
    }

    pub fn sizes(&self) -> VoxelSizes {
        self.sizes
    }

    pub fn points(&self) -> &[LabeledPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        self.counts
    }

    pub fn count(&self, label: Label) -> usize {
        self.counts.get(label)
    }

    /// Whether the voxel `p` falls into is already occupied for its class.
    pub fn is_occupied(&self, p: &LabeledPoint) -> bool {
        self.occupancy.contains_key(&(p.label, self.sizes.key(p)))
    }

    /// Inserts `p` unless its voxel is taken. Returns whether it was kept.
    pub fn insert(&mut self, p: LabeledPoint) -> bool {
        debug_assert!(p.position.iter().all(|c| c.is_finite()));
        let slot = (p.label, self.sizes.key(&p));
        if self.occupancy.contains_key(&slot) {
            return false;
        }
        self.occupancy.insert(slot, self.points.len());
        self.points.push(p);
        self.counts.bump(p.label);
        true
    }

    pub fn extend<'a>(&mut self, points: impl IntoIterator<Item = &'a LabeledPoint>) {
        for p in points {
            self.insert(*p);
        }
    }

    /// Checks that the occupancy index and point list agree.
    pub fn is_consistent(&self) -> bool {
        self.occupancy.len() == self.points.len()
            && self.counts == ClassCounts::of(&self.points)
            && self
                .occupancy
                .iter()
                .all(|(&(label, key), &i)| {
                    let p = &self.points[i];
                    p.label == label && self.sizes.key(p) == key
                })
    }
}

/// Keeps the first point of every occupied `(class, voxel)` cell. Wall and
/// floor points are keyed at the background resolution, target points at
/// the target resolution.
pub fn voxel_downsample(points: &[LabeledPoint], sizes: VoxelSizes) -> LabeledPointCloud {
    let mut cloud = LabeledPointCloud::new(sizes);
    cloud.extend(points);
    cloud
}

/// Voxel filter of `accumulated ++ new_measurement`, accumulated points first.
pub fn merge_observation(
    accumulated: &LabeledPointCloud,
    new_measurement: &[LabeledPoint],
) -> LabeledPointCloud {
    let mut out = accumulated.clone();
    out.extend(new_measurement);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn floor(x: f64, y: f64) -> LabeledPoint {
        LabeledPoint::new([x, y, 0.0], Label::Floor)
    }

    #[test]
    fn rejects_non_positive_sizes() {
        assert!(VoxelSizes::new(0.0, 0.22).is_err());
        assert!(VoxelSizes::new(0.88, -1.0).is_err());
        assert!(VoxelSizes::new(f64::NAN, 0.22).is_err());
    }

    #[test]
    fn nearby_floor_points_collapse() {
        let sizes = VoxelSizes::new(0.88, 0.22).unwrap();
        let c = voxel_downsample(&[floor(1.0, 1.0), floor(1.1, 1.0)], sizes);
        assert_eq!(c.len(), 1);
        assert_eq!(c.points()[0].position, [1.0, 1.0, 0.0]);
    }

    #[test]
    fn target_points_half_a_cell_apart_both_survive() {
        let sizes = VoxelSizes::default();
        let a = LabeledPoint::new([3.05, 3.0, 0.5], Label::Target);
        let b = LabeledPoint::new([3.55, 3.0, 0.5], Label::Target);
        assert_eq!(voxel_downsample(&[a, b], sizes).len(), 2);
    }

    #[test]
    fn classes_do_not_share_voxels() {
        let sizes = VoxelSizes::default();
        let w = LabeledPoint::new([1.0, 1.0, 0.0], Label::Wall);
        assert_eq!(voxel_downsample(&[w, floor(1.0, 1.0)], sizes).len(), 2);
    }

    #[test]
    fn merge_identities() {
        let sizes = VoxelSizes::default();
        let s = voxel_downsample(&[floor(1.0, 1.0), floor(5.0, 2.0)], sizes);
        assert_eq!(merge_observation(&s, &[]), s);
        assert_eq!(merge_observation(&s, s.points()), s);
    }

    fn arb_point() -> impl Strategy<Value = LabeledPoint> {
        ((0.0..6.0f64, 0.0..6.0f64, 0.0..2.0f64), 0u8..3).prop_map(|((x, y, z), l)| {
            LabeledPoint::new([x, y, z], Label::from_code(l).unwrap())
        })
    }

    proptest! {
        #[test]
        fn downsample_is_idempotent(points in prop::collection::vec(arb_point(), 0..200)) {
            let sizes = VoxelSizes::default();
            let once = voxel_downsample(&points, sizes);
            let twice = voxel_downsample(once.points(), sizes);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.is_consistent());
        }

        #[test]
        fn merge_never_loses_points(
            a in prop::collection::vec(arb_point(), 0..100),
            b in prop::collection::vec(arb_point(), 0..100),
        ) {
            let sizes = VoxelSizes::default();
            let acc = voxel_downsample(&a, sizes);
            let merged = merge_observation(&acc, &b);
            for label in Label::ALL {
                prop_assert!(merged.count(label) >= acc.count(label));
            }
            let concat: Vec<_> = a.iter().chain(&b).copied().collect();
            prop_assert_eq!(merged, voxel_downsample(&concat, sizes));
        }
    }
}
