//! Largest-singular-value estimation by power iteration.

use crate::autodiff::SIGMA_EPS;
use crate::tensor::Matrix;

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(SIGMA_EPS);
    x.iter_mut().for_each(|v| *v /= n);
}

/// One power-iteration step on `w` (rows × cols), updating the left vector
/// `u` (rows) and right vector `v` (cols) in place. Returns `uᵀ w v`.
pub fn power_iteration(w: &Matrix, u: &mut [f64], v: &mut [f64]) -> f64 {
    let (rows, cols) = w.shape();
    assert_eq!((u.len(), v.len()), (rows, cols));
    v.iter_mut().for_each(|x| *x = 0.0);
    for (r, &ur) in u.iter().enumerate() {
        for (vc, wc) in v.iter_mut().zip(w.row(r)) {
            *vc += ur * wc;
        }
    }
    normalize(v);
    for (r, ur) in u.iter_mut().enumerate() {
        *ur = w.row(r).iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    }
    normalize(u);
    sigma(w, u, v)
}

pub fn sigma(w: &Matrix, u: &[f64], v: &[f64]) -> f64 {
    (0..w.rows())
        .map(|r| u[r] * w.row(r).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// `w / σ` after `iterations` power steps from the given vectors.
pub fn spectral_normalize(w: &Matrix, u: &mut [f64], v: &mut [f64], iterations: usize) -> Matrix {
    assert!(iterations >= 1, "at least one power iteration");
    let mut s = 0.0;
    for _ in 0..iterations {
        s = power_iteration(w, u, v);
    }
    let s = s.max(SIGMA_EPS);
    w.map(|x| x / s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Singular values via one-sided Jacobi rotations.
    fn jacobi_singular_values(a: &Matrix) -> Vec<f64> {
        let (m, n) = a.shape();
        let mut cols: Vec<Vec<f64>> = (0..n).map(|c| (0..m).map(|r| a[(r, c)]).collect()).collect();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                    let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                    let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                    off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                    if gamma.abs() < 1e-15 {
                        continue;
                    }
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for r in 0..m {
                        let (x, y) = (cols[p][r], cols[q][r]);
                        cols[p][r] = c * x - s * y;
                        cols[q][r] = s * x + c * y;
                    }
                }
            }
            if off < 1e-14 {
                break;
            }
        }
        let mut s: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    fn unit_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        normalize(&mut v);
        v
    }

    #[test]
    fn diagonal_matrix() {
        let w = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let (mut u, mut v) = (unit_vec(2, 1), unit_vec(2, 2));
        let out = spectral_normalize(&w, &mut u, &mut v, 60);
        let expected = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0 / 3.0]]);
        assert!(out.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn rotation_is_unchanged() {
        let (c, s) = (0.6, 0.8);
        let w = Matrix::from_rows(&[&[c, -s], &[s, c]]);
        let (mut u, mut v) = (unit_vec(2, 3), unit_vec(2, 4));
        let out = spectral_normalize(&w, &mut u, &mut v, 5);
        assert!(out.max_abs_diff(&w) < 1e-3);
    }

    #[test]
    fn random_matrix_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Matrix::uniform(16, 16, 1.0, &mut rng);
        let top = jacobi_singular_values(&w)[0];
        let (mut u, mut v) = (unit_vec(16, 5), unit_vec(16, 6));
        let out = spectral_normalize(&w, &mut u, &mut v, 50);
        let s_out = jacobi_singular_values(&out)[0];
        assert!((s_out - 1.0).abs() < 1e-3, "{s_out} (oracle σ {top})");
    }

    #[test]
    fn zero_matrix_stays_finite() {
        let w = Matrix::zeros(3, 2);
        let (mut u, mut v) = (unit_vec(3, 7), unit_vec(2, 8));
        let out = spectral_normalize(&w, &mut u, &mut v, 1);
        assert!(out.as_slice().iter().all(|x| *x == 0.0));
    }
}
