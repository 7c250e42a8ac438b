//! Cross-entropy between the online distribution and the projected target.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::network::PointNet;
use crate::params::{GradStore, ParamStore};
use crate::tensor::Matrix;

use super::c51_project;
use super::replay::Transition;

pub struct LossReport {
    /// Weighted mean cross-entropy over the batch.
    pub loss: f64,
    /// Gradient of `loss` with respect to every trainable online parameter.
    pub grads: GradStore,
    /// Unweighted cross-entropy of each transition.
    pub per_sample: Vec<f64>,
}

/// Projected target distribution. The online network picks the next
/// action and the target network scores it.
pub fn target_distribution(net: &PointNet, online: &ParamStore, target: &ParamStore, t: &Transition) -> Result<Vec<f64>> {
    let support = net.config().support();
    if t.done {
        let mut delta = vec![0.0; support.len()];
        delta[0] = 1.0;
        return c51_project(&delta, t.reward, true, t.discount, &support);
    }
    let next = t.next.to_input(net.config().point_cap);
    let plan = net.plan(&next.positions());
    let best = net.forward_planned(online, &next, &plan).greedy_action();
    let dist = net.forward_planned(target, &next, &plan);
    c51_project(dist.probs.row(best), t.reward, false, t.discount, &support)
}

/// `−Σ_i m_i log p(a, i)` for logits of shape `(actions, atoms)`, scaled.
pub fn cross_entropy(tape: &mut Tape, logits: Var, action: usize, target: &[f64], scale: f64) -> Var {
    let logp = tape.log_softmax_rows(logits);
    let row = tape.select_row(logp, action);
    let w = Matrix::from_vec(1, target.len(), target.iter().map(|m| -m * scale).collect());
    tape.weighted_sum(row, w)
}

/// Batch loss and gradients. `weights` are importance weights, one per
/// transition; the loss is their weighted mean.
pub fn compute_loss(
    net: &PointNet,
    online: &ParamStore,
    target: &ParamStore,
    batch: &[&Transition],
    weights: &[f64],
) -> Result<LossReport> {
    assert_eq!(batch.len(), weights.len());
    let scale = 1.0 / batch.len() as f64;
    let mut grads = GradStore::for_store(online);
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for (t, &w) in batch.iter().zip(weights) {
        let m = target_distribution(net, online, target, t)?;
        let input = t.state.to_input(net.config().point_cap);
        let plan = net.plan(&input.positions());
        let mut tape = Tape::with_params(online);
        let logits = net.forward_logits(&mut tape, &input, &plan);
        let l = cross_entropy(&mut tape, logits, t.action.index(), &m, w * scale);
        let value = tape.value(l)[(0, 0)];
        loss += value;
        per_sample.push(if w * scale > 0.0 { value / (w * scale) } else { 0.0 });
        for (id, g) in tape.backward(l).params() {
            grads.accumulate(id, g);
        }
    }
    Ok(LossReport { loss, grads, per_sample })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matching_distributions_leave_only_the_entropy() {
        let logits0 = Matrix::uniform(3, 5, 2.0, &mut ChaCha8Rng::seed_from_u64(3));
        let p = softmax_rows(&logits0);
        let m: Vec<f64> = p.row(1).to_vec();
        let mut tape = Tape::new();
        let logits = tape.variable(logits0);
        let l = cross_entropy(&mut tape, logits, 1, &m, 1.0);
        let entropy: f64 = -m.iter().map(|x| x * x.ln()).sum::<f64>();
        assert!((tape.value(l)[(0, 0)] - entropy).abs() < 1e-12);
        let g = tape.backward(l);
        assert!(g.wrt(logits).unwrap().as_slice().iter().all(|x| x.abs() < 1e-6));
    }
}
