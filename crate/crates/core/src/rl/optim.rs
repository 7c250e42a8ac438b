//! Adam with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::params::{GradStore, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm cap; non-positive disables clipping.
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub settings: AdamSettings,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(lr: f64, eps: f64, clip: f64, store: &ParamStore) -> Self {
        Self {
            settings: AdamSettings { lr, beta1: 0.9, beta2: 0.999, eps, clip },
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &GradStore) {
        let s = &self.settings;
        let norm = grads.global_norm();
        let scale = if s.clip > 0.0 && norm > s.clip { s.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - s.beta1.powi(self.step as i32);
        let bc2 = 1.0 - s.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let w = store.get_mut(id);
            for (((w, m), v), g) in w
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                let g = g * scale;
                *m = s.beta1 * *m + (1.0 - s.beta1) * g;
                *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
                *w -= s.lr * (*m / bc1) / ((*v / bc2).sqrt() + s.eps);
            }
        }
    }

    /// Moment tensors under `adam.m.<name>` and `adam.v.<name>`.
    pub fn push_to(&self, store: &ParamStore, c: &mut Checkpoint) {
        for id in store.ids() {
            let i = id.index();
            if let (Some(m), Some(v)) = (&self.m[i], &self.v[i]) {
                c.tensors.push((format!("adam.m.{}", store.name(id)), m.clone()));
                c.tensors.push((format!("adam.v.{}", store.name(id)), v.clone()));
            }
        }
    }

    pub fn restore(settings: AdamSettings, step: u64, store: &ParamStore, c: &Checkpoint) -> Result<Self> {
        let mut a = Self { settings, step, m: vec![None; store.len()], v: vec![None; store.len()] };
        for id in store.ids() {
            let name = store.name(id);
            let i = id.index();
            a.m[i] = c.tensor(&format!("adam.m.{name}")).cloned();
            a.v[i] = c.tensor(&format!("adam.v.{name}")).cloned();
            for m in [&a.m[i], &a.v[i]].into_iter().flatten() {
                if m.shape() != store.get(id).shape() {
                    return Err(crate::Error::Shape(format!("optimizer state for {name} has shape {:?}", m.shape())));
                }
            }
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::row_vector(&[3.0, -2.0]));
        let mut adam = Adam::new(0.05, 1e-8, 0.0, &store);
        for _ in 0..2000 {
            let mut g = GradStore::for_store(&store);
            g.accumulate(id, &store.get(id).map(|x| 2.0 * x));
            adam.update(&mut store, &g);
        }
        assert!(store.get(id).frobenius_norm() < 1e-3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::row_vector(&[1.0]));
        let mut adam = Adam::new(0.1, 0.0, 0.0, &store);
        let mut g = GradStore::for_store(&store);
        g.accumulate(id, &Matrix::row_vector(&[123.0]));
        adam.update(&mut store, &g);
        assert!((store.get(id)[(0, 0)] - 0.9).abs() < 1e-12);
    }
}
