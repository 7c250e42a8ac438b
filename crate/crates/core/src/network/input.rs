//! Per-point network input: agent-frame coordinates plus a class one-hot.

use crate::environment::{AgentPose, Observation};
use crate::geometry::{Label, LabeledPoint, Vec3};
use crate::tensor::Matrix;

/// `(point_cap, 6)` features. Rows past the real points repeat them
/// cyclically; an empty cloud gives origin rows tagged as floor.
#[derive(Clone, Debug, PartialEq)]
pub struct InputTensor {
    features: Matrix,
    real_points: usize,
}

impl InputTensor {
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    /// Number of rows that came from the cloud rather than padding.
    pub fn real_points(&self) -> usize {
        self.real_points
    }

    pub fn positions(&self) -> Vec<Vec3> {
        (0..self.rows())
            .map(|r| {
                let row = self.features.row(r);
                [row[0], row[1], row[2]]
            })
            .collect()
    }

    /// Builds directly from a `(rows, 6)` matrix.
    pub fn from_features(features: Matrix) -> Self {
        assert_eq!(features.cols(), 6, "input rows have six features");
        let real_points = features.rows();
        Self { features, real_points }
    }
}

/// World point expressed in the agent frame: x forward, y left, z up.
pub fn to_agent_frame(p: Vec3, pose: AgentPose) -> Vec3 {
    let [fx, fy] = pose.heading.forward().map(|c| c as f64);
    let (dx, dy) = (p[0] - (pose.cell[0] as f64 + 0.5), p[1] - (pose.cell[1] as f64 + 0.5));
    [dx * fx + dy * fy, -dx * fy + dy * fx, p[2]]
}

pub fn build_input(points: &[LabeledPoint], pose: AgentPose, point_cap: usize) -> InputTensor {
    let mut features = Matrix::zeros(point_cap, 6);
    let take = points.len().min(point_cap);
    for r in 0..point_cap {
        let row = features.row_mut(r);
        if take == 0 {
            row[3 + Label::Floor.code() as usize] = 1.0;
            continue;
        }
        let p = &points[r % take];
        row[..3].copy_from_slice(&to_agent_frame(p.position, pose));
        row[3 + p.label.code() as usize] = 1.0;
    }
    InputTensor { features, real_points: take }
}

pub fn build_observation_input(obs: &Observation, point_cap: usize) -> InputTensor {
    build_input(&obs.points, obs.pose, point_cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Heading;

    fn pose(h: Heading) -> AgentPose {
        AgentPose { cell: [3, 4], heading: h }
    }

    #[test]
    fn the_cell_ahead_is_plus_x() {
        for h in Heading::ALL {
            let [fx, fy] = h.forward();
            let ahead = [3.5 + fx as f64, 4.5 + fy as f64, 0.25];
            let q = to_agent_frame(ahead, pose(h));
            assert!((q[0] - 1.0).abs() < 1e-12 && q[1].abs() < 1e-12 && q[2] == 0.25, "{h:?}");
        }
    }

    #[test]
    fn clockwise_turn_rotates_coordinates_counter_clockwise() {
        let p = [5.1, 2.7, 0.0];
        for h in Heading::ALL {
            let a = to_agent_frame(p, pose(h));
            let b = to_agent_frame(p, pose(h.clockwise()));
            // CCW by 90°: (x, y) -> (-y, x)
            assert!((b[0] + a[1]).abs() < 1e-12 && (b[1] - a[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_repeats_points_cyclically() {
        let pts: Vec<_> = (0..100)
            .map(|i| LabeledPoint::new([i as f64, 0.0, 0.0], Label::ALL[i % 3]))
            .collect();
        let x = build_input(&pts, pose(Heading::North), 512);
        assert_eq!(x.real_points(), 100);
        for r in 100..512 {
            assert_eq!(x.features().row(r), x.features().row(r % 100));
        }
        for r in 0..512 {
            assert_eq!(x.features().row(r)[3..].iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn empty_cloud_gives_floor_sentinels() {
        let x = build_input(&[], pose(Heading::West), 4);
        for r in 0..4 {
            assert_eq!(x.features().row(r), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }
}
