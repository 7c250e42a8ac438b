use std::cmp::Ordering;

use super::{squared_distance, Vec3};
use crate::error::{Error, Result};

fn lex_cmp(a: &Vec3, b: &Vec3) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Is candidate `(d, i)` preferred over incumbent `(best_d, best)`?
/// Larger distance wins, then lexicographically smaller coordinates, then
/// the lower index.
fn preferred(points: &[Vec3], d: f64, i: usize, best_d: f64, best: usize) -> bool {
    match d.total_cmp(&best_d) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match lex_cmp(&points[i], &points[best]) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => i < best,
        },
    }
}

/// Centroid summed in lexicographic point order so the result does not
/// depend on how the input happens to be ordered.
fn centroid(points: &[Vec3]) -> Vec3 {
    let mut order: Vec<&Vec3> = points.iter().collect();
    order.sort_by(|a, b| lex_cmp(a, b));
    let mut c = [0.0; 3];
    for p in order {
        for (acc, v) in c.iter_mut().zip(p) {
            *acc += v;
        }
    }
    c.map(|v| v / points.len() as f64)
}

/// Greedy max-min selection of `n` indices, in pick order.
///
/// The first pick is the point farthest from the centroid; every later pick
/// maximizes the distance to the nearest already-picked point.
pub fn farthest_point_sample(points: &[Vec3], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > points.len() {
        return Err(Error::Argument(format!(
            "cannot sample {n} of {} points",
            points.len()
        )));
    }
    let c = centroid(points);
    let mut seed = 0;
    let mut seed_d = squared_distance(&points[0], &c);
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = squared_distance(p, &c);
        if preferred(points, d, i, seed_d, seed) {
            seed = i;
            seed_d = d;
        }
    }

    let mut picked = Vec::with_capacity(n);
    let mut taken = vec![false; points.len()];
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut current = seed;
    loop {
        picked.push(current);
        taken[current] = true;
        if picked.len() == n {
            return Ok(picked);
        }
        let anchor = points[current];
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = squared_distance(p, &anchor).min(min_d[i]);
            min_d[i] = d;
            best = match best {
                Some((bd, bi)) if !preferred(points, d, i, bd, bi) => Some((bd, bi)),
                _ => Some((d, i)),
            };
        }
        current = best.expect("unpicked points remain").1;
    }
}

/// For every center, the indices of its `k` nearest points sorted by
/// ascending distance (ties by lower index). The center itself comes first.
pub fn knn_group(points: &[Vec3], centers: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > points.len() {
        return Err(Error::Argument(format!(
            "cannot take {k} neighbors among {} points",
            points.len()
        )));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= points.len()) {
        return Err(Error::Argument(format!("center index {bad} out of range")));
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    Ok(centers
        .iter()
        .map(|&c| {
            keyed.clear();
            keyed.extend(
                points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (squared_distance(p, &points[c]), i)),
            );
            let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < keyed.len() {
                keyed.select_nth_unstable_by(k - 1, by_key);
            }
            let nearest = &mut keyed[..k];
            nearest.sort_unstable_by(by_key);
            nearest.iter().map(|&(_, i)| i).collect()
        })
        .collect())
}

/// FPS centers plus their neighborhoods for one embedding block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingGeometry {
    pub fps_indices: Vec<usize>,
    pub neighbor_indices: Vec<Vec<usize>>,
}

impl EmbeddingGeometry {
    pub fn compute(points: &[Vec3], num_fps: usize, k: usize) -> Result<Self> {
        let fps_indices = farthest_point_sample(points, num_fps)?;
        let neighbor_indices = knn_group(points, &fps_indices, k)?;
        Ok(Self {
            fps_indices,
            neighbor_indices,
        })
    }

    /// Neighbor rows flattened center-major, `k` entries per center.
    pub fn flat_neighbors(&self) -> Vec<usize> {
        self.neighbor_indices.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EmbeddingVerdict {
    Pass,
    Fail(String),
}

impl EmbeddingVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, EmbeddingVerdict::Pass)
    }
}

/// Every input point can only be represented by some center's neighborhood
/// if there are more neighborhood slots than inputs:
/// `num_input_points < num_fps * k`. Passing is necessary, not sufficient.
pub fn validate_embedding_config(num_input_points: usize, num_fps: usize, k: usize) -> EmbeddingVerdict {
    let slots = num_fps.saturating_mul(k);
    if num_input_points < slots {
        EmbeddingVerdict::Pass
    } else {
        EmbeddingVerdict::Fail(format!(
            "{num_input_points} input points need more than {num_fps} centers x {k} neighbors = {slots} slots"
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_picks_far_end_then_origin() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![3, 0]);
    }

    #[test]
    fn exhausting_the_cloud_selects_everything() {
        let pts: Vec<Vec3> = (0..7).map(|i| [i as f64, (i * i) as f64, 0.0]).collect();
        let mut picked = farthest_point_sample(&pts, 7).unwrap();
        picked.sort();
        assert_eq!(picked, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn symmetric_ties_use_lexicographic_order() {
        // All four corners are equally far from the centroid.
        let pts = [[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 1).unwrap(), vec![3]);
    }

    #[test]
    fn invalid_sample_counts() {
        let pts = [[0.0; 3]; 3];
        assert!(farthest_point_sample(&pts, 0).is_err());
        assert!(farthest_point_sample(&pts, 4).is_err());
        assert!(knn_group(&pts, &[0], 4).is_err());
        assert!(knn_group(&pts, &[5], 1).is_err());
    }

    #[test]
    fn knn_of_one_is_the_center() {
        let pts: Vec<Vec3> = (0..5).map(|i| [i as f64 * 0.3, 1.0, 2.0]).collect();
        let rows = knn_group(&pts, &[0, 2, 4], 1).unwrap();
        assert_eq!(rows, vec![vec![0], vec![2], vec![4]]);
    }

    #[test]
    fn knn_excludes_square_diagonal() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let rows = knn_group(&pts, &[0], 3).unwrap();
        assert_eq!(rows[0], vec![0, 1, 3]);
    }

    #[test]
    fn embedding_config_examples() {
        assert!(validate_embedding_config(512, 256, 32).passed());
        assert!(!validate_embedding_config(512, 16, 32).passed());
        assert!(!validate_embedding_config(512, 512, 1).passed());
    }
}
