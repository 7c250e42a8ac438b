//! Central finite-difference checks for every network block and the loss.
//!
//! Each suite builds a scalar from a block at toy size, takes the analytic
//! gradient from [`Tape::backward`], and compares it entry by entry with
//! `D(h) = (f(x + h) − f(x − h)) / 2h`, refined once by Richardson
//! extrapolation to `(4·D(h/2) − D(h)) / 3` so the oracle's own truncation
//! error stays well below the tolerance where point normalization over a
//! handful of points curves sharply. The relative error of one entry is
//! `|a − n| / max(|a|, |n|, REL_FLOOR)`.
//!
//! ReLU and max-pool make the functions piecewise smooth. When a perturbed
//! pass takes a different branch than the unperturbed one (see
//! [`Tape::branch_signature`]) the step is shrunk tenfold, up to twice. An
//! entry that never settles on one piece is counted in
//! [`SuiteReport::kinks`] and left out of the maximum.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::environment::{Action, AgentPose, Heading};
use crate::geometry::{EmbeddingGeometry, Vec3};
use crate::network::{
    dueling_logits, embed_block, global_maxpool_concat, multi_head_attention, offset_attention_head, power_iteration, spectral_linear,
    stem, AttentionNorm, InputTensor, NetworkConfig, PointNet,
};
use crate::params::{ParamId, ParamStore};
use crate::rl::{compute_loss, cross_entropy, target_distribution};
use crate::rl::{Snapshot, Transition, FIXED_SCALE};
use crate::tensor::Matrix;

pub const STEP: f64 = 1e-4;
/// Rounding noise of a difference quotient on an O(1) scalar is about
/// 1e-10, so smaller gradients are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const SUITES: [&str; 9] = [
    "stem",
    "embed_block",
    "offset_attention",
    "multi_head_attention",
    "global_maxpool_concat",
    "dueling_head",
    "spectral_normalize",
    "end_to_end",
    "loss",
];

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Entries compared.
    pub entries: usize,
    /// Entries that sat on a kink at every step size.
    pub kinks: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Analytic gradients keyed like the perturbable entries.
struct Analytic {
    params: Vec<Option<Matrix>>,
    inputs: Vec<Matrix>,
}

/// Compares `analytic` with central differences of `eval`, which returns the
/// scalar and a branch signature.
fn compare(
    name: &str,
    store: &ParamStore,
    inputs: &[Matrix],
    analytic: Analytic,
    eval: &dyn Fn(&ParamStore, &[Matrix]) -> (f64, u64),
) -> SuiteReport {
    let (_, base_sig) = eval(store, inputs);
    let mut report = SuiteReport { name: name.to_string(), max_rel_error: 0.0, entries: 0, kinks: 0 };
    let mut record = |a: f64, n: Option<f64>| {
        report.entries += 1;
        match n {
            Some(n) => report.max_rel_error = report.max_rel_error.max(rel_error(a, n)),
            None => report.kinks += 1,
        }
    };
    let numeric = |perturb: &mut dyn FnMut(f64) -> (f64, u64)| {
        let mut central = |h: f64| {
            let (fp, sp) = perturb(h);
            let (fm, sm) = perturb(-h);
            (sp == base_sig && sm == base_sig).then(|| (fp - fm) / (2.0 * h))
        };
        let mut h = STEP;
        for _ in 0..3 {
            if let (Some(d1), Some(d2)) = (central(h), central(h / 2.0)) {
                return Some((4.0 * d2 - d1) / 3.0);
            }
            h /= 10.0;
        }
        None
    };

    let mut work = store.clone();
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let grad = analytic.params[id.index()].clone().unwrap_or_else(|| {
            let (r, c) = store.get(id).shape();
            Matrix::zeros(r, c)
        });
        for i in 0..grad.as_slice().len() {
            let orig = store.get(id).as_slice()[i];
            let n = numeric(&mut |h| {
                work.get_mut(id).as_mut_slice()[i] = orig + h;
                let out = eval(&work, inputs);
                work.get_mut(id).as_mut_slice()[i] = orig;
                out
            });
            record(grad.as_slice()[i], n);
        }
    }
    let mut xs = inputs.to_vec();
    for (j, grad) in analytic.inputs.iter().enumerate() {
        for i in 0..grad.as_slice().len() {
            let orig = inputs[j].as_slice()[i];
            let n = numeric(&mut |h| {
                xs[j].as_mut_slice()[i] = orig + h;
                let out = eval(store, &xs);
                xs[j].as_mut_slice()[i] = orig;
                out
            });
            record(grad.as_slice()[i], n);
        }
    }
    report
}

/// Checks a scalar built on one tape from the store and input leaves.
pub fn check_tape(name: &str, store: &ParamStore, inputs: &[Matrix], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> SuiteReport {
    let run = |s: &ParamStore, xs: &[Matrix]| {
        let mut tape = Tape::with_params(s);
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape.value(out)[(0, 0)], tape.branch_signature())
    };
    let mut tape = Tape::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);
    let mut params = vec![None; store.len()];
    for (id, g) in grads.params() {
        let slot: &mut Option<Matrix> = &mut params[id.index()];
        match slot {
            Some(acc) => acc.add_assign(g),
            None => *slot = Some(g.clone()),
        }
    }
    let inputs_grad = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.wrt(*v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols())))
        .collect();
    compare(name, store, inputs, Analytic { params, inputs: inputs_grad }, &run)
}

/// Toy network: 16 points, width 8, 4 neighbors, 5 atoms, two blocks and
/// two heads.
pub fn toy_config() -> NetworkConfig {
    NetworkConfig {
        k: 4,
        feature_dim: 8,
        hidden_dim: 8,
        atoms: 5,
        v_max: 20.0,
        point_cap: 16,
        ..NetworkConfig::parse("Cs8s4h2").expect("valid architecture")
    }
}

fn random_positions(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..1.5)]).collect()
}

/// Shifts every stored tensor off its initial value and settles the
/// power-iteration vectors, so no block starts at a special point.
fn jittered_params(net: &PointNet, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = net.init_params(rng);
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        for v in store.get_mut(id).as_mut_slice() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    for _ in 0..20 {
        net.power_iteration(&mut store);
    }
    store
}

fn weights_like(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::uniform(rows, cols, 1.0, rng)
}

fn random_snapshot(points: usize, rng: &mut ChaCha8Rng) -> Snapshot {
    let pts = (0..points)
        .map(|_| {
            let p = [rng.random_range(1.0..6.0), rng.random_range(1.0..6.0), rng.random_range(0.0..1.0)];
            (p.map(|c: f64| (c * FIXED_SCALE).round() as i32), rng.random_range(0..3u8))
        })
        .collect();
    Snapshot { points: pts, pose: AgentPose { cell: [3, 3], heading: Heading::East } }
}

pub fn run_suite(name: &str, seed: u64) -> Option<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_config();
    let net = PointNet::new(cfg.clone()).expect("toy config is valid");
    let store = jittered_params(&net, &mut rng);
    let report = match name {
        "stem" => {
            let x = Matrix::uniform(16, 6, 1.0, &mut rng);
            let w = weights_like(16, cfg.stem_widths()[1].1, &mut rng);
            let layers = *net.stem();
            check_tape(name, &store, &[x], &|t, v| {
                let y = stem(t, &layers, v[0]);
                t.weighted_sum(y, w.clone())
            })
        }
        "embed_block" => {
            let geo = EmbeddingGeometry::compute(&random_positions(16, &mut rng), 8, 4).expect("16 points");
            let (fin, fout) = cfg.block_widths()[0];
            let x = Matrix::uniform(16, fin, 1.0, &mut rng);
            let w = weights_like(8, fout, &mut rng);
            let block = net.blocks()[0];
            check_tape(name, &store, &[x], &|t, v| {
                let y = embed_block(t, &block, v[0], &geo);
                t.weighted_sum(y, w.clone())
            })
        }
        "offset_attention" => {
            let wide = PointNet::new(NetworkConfig { feature_dim: 16, heads: 1, ..cfg.clone() }).expect("valid");
            let store = jittered_params(&wide, &mut rng);
            let x = Matrix::uniform(8, 16, 1.0, &mut rng);
            let w = weights_like(8, 16, &mut rng);
            let head = wide.attention().heads[0];
            let offset = check_tape(name, &store, std::slice::from_ref(&x), &|t, v| {
                let y = offset_attention_head(t, &head, v[0], AttentionNorm::OffsetL1);
                t.weighted_sum(y, w.clone())
            });
            let scaled = check_tape(name, &store, &[x], &|t, v| {
                let y = offset_attention_head(t, &head, v[0], AttentionNorm::ScaledSoftmax);
                t.weighted_sum(y, w.clone())
            });
            merge(offset, scaled)
        }
        "multi_head_attention" => {
            let x = Matrix::uniform(8, cfg.feature_dim, 1.0, &mut rng);
            let w = weights_like(8, cfg.feature_dim, &mut rng);
            let mh = net.attention().clone();
            check_tape(name, &store, &[x], &|t, v| {
                let y = multi_head_attention(t, &mh, v[0], AttentionNorm::OffsetL1);
                t.weighted_sum(y, w.clone())
            })
        }
        "global_maxpool_concat" => {
            let x = Matrix::uniform(8, cfg.feature_dim, 1.0, &mut rng);
            let w = weights_like(8, 2 * cfg.feature_dim, &mut rng);
            check_tape(name, &ParamStore::new(), &[x], &|t, v| {
                let y = global_maxpool_concat(t, v[0]);
                t.weighted_sum(y, w.clone())
            })
        }
        "dueling_head" => {
            let x = Matrix::uniform(cfg.pooled_rows(), 2 * cfg.feature_dim, 1.0, &mut rng);
            let w = weights_like(cfg.action_count, cfg.atoms, &mut rng);
            let head = *net.head();
            check_tape(name, &store, &[x], &|t, v| {
                let y = dueling_logits(t, &head, v[0], &cfg);
                let y = t.log_softmax_rows(y);
                t.weighted_sum(y, w.clone())
            })
        }
        "spectral_normalize" => {
            let mut u: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = Matrix::uniform(5, 4, 1.0, &mut rng);
            for _ in 0..30 {
                power_iteration(&m, &mut u, &mut v);
            }
            let wm = weights_like(5, 4, &mut rng);
            let x = Matrix::uniform(3, cfg.tail_width(), 1.0, &mut rng);
            let wx = weights_like(3, cfg.hidden_dim, &mut rng);
            let layer = net.head().value_hidden;
            check_tape(name, &store, &[m, x], &|t, vars| {
                let n = t.spectral_norm(vars[0], &u, &v);
                let a = t.weighted_sum(n, wm.clone());
                let y = spectral_linear(t, &layer, vars[1]);
                let b = t.weighted_sum(y, wx.clone());
                t.add(a, b)
            })
        }
        "end_to_end" => {
            let input = random_snapshot(12, &mut rng).to_input(cfg.point_cap);
            let plan = net.plan(&input.positions());
            let w = weights_like(cfg.action_count, cfg.atoms, &mut rng);
            let net = &net;
            check_tape(name, &store, &[], &|t, _| {
                let y = net.forward_logits(t, &input, &plan);
                let y = t.log_softmax_rows(y);
                t.weighted_sum(y, w.clone())
            })
        }
        "loss" => loss_suite(&net, &store, &mut rng),
        _ => return None,
    };
    Some(report)
}

fn merge(a: SuiteReport, b: SuiteReport) -> SuiteReport {
    SuiteReport {
        name: a.name,
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        entries: a.entries + b.entries,
        kinks: a.kinks + b.kinks,
    }
}

/// Two transitions, one terminal, through the full double-Q target and
/// cross-entropy. The target distribution is held constant by the
/// analytic gradient, and it only moves under perturbation when the online
/// argmax flips, which the signature catches.
fn loss_suite(net: &PointNet, online: &ParamStore, rng: &mut ChaCha8Rng) -> SuiteReport {
    let target = jittered_params(net, rng);
    let batch: Vec<Transition> = [(Action::Forward, 3.0, false), (Action::RotateCCW, 1.0, true)]
        .into_iter()
        .map(|(action, reward, done)| Transition {
            state: Arc::new(random_snapshot(10, rng)),
            action,
            reward,
            next: Arc::new(random_snapshot(14, rng)),
            done,
            discount: 0.99,
            illegal: false,
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let weights = [1.0, 0.6];
    let report = compute_loss(net, online, &target, &refs, &weights).expect("toy batch is valid");
    let params = online.ids().map(|id| report.grads.get(id).cloned()).collect();

    let cap = net.config().point_cap;
    let prepared: Vec<(InputTensor, _)> = batch
        .iter()
        .map(|t| {
            let input = t.state.to_input(cap);
            let plan = net.plan(&input.positions());
            (input, plan)
        })
        .collect();
    let eval = |store: &ParamStore, _: &[Matrix]| {
        let mut total = 0.0;
        let mut h = DefaultHasher::new();
        for ((t, (input, plan)), w) in batch.iter().zip(&prepared).zip(weights) {
            let m = target_distribution(net, store, &target, t).expect("valid");
            m.iter().for_each(|x| x.to_bits().hash(&mut h));
            let mut tape = Tape::with_params(store);
            let logits = net.forward_logits(&mut tape, input, plan);
            let l = cross_entropy(&mut tape, logits, t.action.index(), &m, w / batch.len() as f64);
            total += tape.value(l)[(0, 0)];
            tape.branch_signature().hash(&mut h);
        }
        (total, h.finish())
    };
    compare("loss", online, &[], Analytic { params, inputs: vec![] }, &eval)
}

/// Every suite in [`SUITES`] order.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    SUITES.iter().filter_map(|s| run_suite(s, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_uses_the_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 1e-4).abs() < 1e-15);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn relu_layer_passes_and_a_corrupted_rule_fails() {
        let x = Matrix::from_rows(&[&[0.3, -1.2, 2.0, 0.7]]);
        let w = Matrix::from_rows(&[&[1.5, -0.5, 0.25, 2.0]]);
        let build = |t: &mut Tape, v: &[Var]| {
            let y = t.relu(v[0]);
            t.weighted_sum(y, w.clone())
        };
        let good = check_tape("relu", &ParamStore::new(), std::slice::from_ref(&x), &build);
        assert!(good.passed(), "{good:?}");
        assert_eq!((good.entries, good.kinks), (4, 0));
        crate::autodiff::inject_backward_fault(true);
        let bad = check_tape("relu", &ParamStore::new(), &[x], &build);
        crate::autodiff::inject_backward_fault(false);
        assert!(!bad.passed(), "{bad:?}");
    }

    #[test]
    fn every_suite_runs() {
        for name in SUITES {
            let r = run_suite(name, 0).unwrap();
            assert!(r.entries > 0, "{name}");
        }
        assert!(run_suite("nope", 0).is_none());
    }
}
