//! Parameter layout and the forward pass of the point-cloud Q-network.

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{AttentionNorm, Mode, NetworkConfig, Tail};
use super::input::InputTensor;
use super::spectral::power_iteration;
use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::Result;
use crate::geometry::{validate_embedding_config, EmbeddingGeometry, EmbeddingVerdict, Vec3};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform { fan_in: usize },
    Ones,
    Zeros,
    UnitGaussian,
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
    trainable: bool,
}

/// Records parameter shapes in creation order. Ids are slot indices, so a
/// layout can be built and counted without allocating any weights.
#[derive(Default)]
struct Builder {
    slots: Vec<Slot>,
}

impl Builder {
    fn slot(&mut self, name: String, rows: usize, cols: usize, init: Init, trainable: bool) -> ParamId {
        self.slots.push(Slot { name, rows, cols, init, trainable });
        ParamId(self.slots.len() - 1)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let w = self.slot(format!("{name}.w"), fan_in, fan_out, Init::Uniform { fan_in }, true);
        let b = bias.then(|| self.slot(format!("{name}.b"), 1, fan_out, Init::Uniform { fan_in }, true));
        Linear { w, b }
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            linear: self.linear(name, fan_in, fan_out, true),
            gamma: self.slot(format!("{name}.gamma"), 1, fan_out, Init::Ones, true),
            beta: self.slot(format!("{name}.beta"), 1, fan_out, Init::Zeros, true),
        }
    }

    fn spectral(&mut self, name: &str, fan_in: usize, fan_out: usize) -> SpectralLinear {
        SpectralLinear {
            linear: self.linear(name, fan_in, fan_out, true),
            u: self.slot(format!("{name}.u"), 1, fan_in, Init::UnitGaussian, false),
            v: self.slot(format!("{name}.v"), 1, fan_out, Init::UnitGaussian, false),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

/// Linear layer, normalization over points, ReLU.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub linear: Linear,
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Linear layer whose weight is divided by its power-iteration estimate of σ.
#[derive(Clone, Copy, Debug)]
pub struct SpectralLinear {
    pub linear: Linear,
    pub u: ParamId,
    pub v: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EmbedBlock {
    pub first: Dense,
    pub second: Dense,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub transform: Dense,
}

#[derive(Clone, Debug)]
pub struct MultiHead {
    pub heads: Vec<AttentionHead>,
    pub merge: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct DuelingHead {
    pub value_hidden: SpectralLinear,
    pub value_out: Linear,
    pub advantage_hidden: SpectralLinear,
    pub advantage_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: [Dense; 2],
    blocks: Vec<EmbedBlock>,
    attention: MultiHead,
    head: DuelingHead,
}

impl Layout {
    fn build(cfg: &NetworkConfig, b: &mut Builder) -> Self {
        let stem = cfg.stem_widths();
        let stem = [b.dense("stem.0", stem[0].0, stem[0].1), b.dense("stem.1", stem[1].0, stem[1].1)];
        let blocks = cfg
            .block_widths()
            .into_iter()
            .enumerate()
            .map(|(i, (fin, fout))| EmbedBlock {
                first: b.dense(&format!("embed.{i}.0"), 2 * fin, fout),
                second: b.dense(&format!("embed.{i}.1"), fout, fout),
            })
            .collect();
        let f = cfg.feature_dim;
        let d = cfg.qk_dim();
        let heads = (0..cfg.heads)
            .map(|h| AttentionHead {
                query: b.linear(&format!("attn.{h}.q"), f, d, false),
                key: b.linear(&format!("attn.{h}.k"), f, d, false),
                value: b.linear(&format!("attn.{h}.v"), f, f, true),
                transform: b.dense(&format!("attn.{h}.t"), f, f),
            })
            .collect();
        let attention = MultiHead { heads, merge: b.linear("attn.merge", cfg.heads * f, f, true) };
        let (width, hidden) = (cfg.tail_width(), cfg.hidden_dim);
        let head = DuelingHead {
            value_hidden: b.spectral("value.0", width, hidden),
            value_out: b.linear("value.1", hidden, cfg.atoms, true),
            advantage_hidden: b.spectral("advantage.0", width, hidden),
            advantage_out: b.linear("advantage.1", hidden, cfg.action_count * cfg.atoms, true),
        };
        Layout { stem, blocks, attention, head }
    }
}

/// Categorical return distribution per action.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueDistribution {
    pub probs: Matrix,
    pub support: Vec<f64>,
}

impl ValueDistribution {
    /// `Q(a) = Σ_i z_i p(a, i)`.
    pub fn expected_values(&self) -> Vec<f64> {
        (0..self.probs.rows())
            .map(|a| self.probs.row(a).iter().zip(&self.support).map(|(p, z)| p * z).sum())
            .collect()
    }

    /// Arg-max of the expected values, lowest index on ties.
    pub fn greedy_action(&self) -> usize {
        argmax(&self.expected_values())
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Sampling and grouping indices for every embedding block of one input,
/// plus the canonical row order handed to the tail.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPlan {
    pub blocks: Vec<EmbeddingGeometry>,
    /// Set only without embedding blocks: FPS order over all points.
    pub order: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct PointNet {
    config: NetworkConfig,
    layout: Layout,
    slots: Vec<Slot>,
}

impl PointNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut inputs = config.point_cap;
        for (i, &n) in config.block_points().iter().enumerate() {
            if let EmbeddingVerdict::Fail(reason) = validate_embedding_config(inputs, n, config.k) {
                log::warn!("embedding block {i}: {reason}");
            }
            inputs = n;
        }
        let mut b = Builder::default();
        let layout = Layout::build(&config, &mut b);
        Ok(Self { config, layout, slots: b.slots })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Trainable scalar count, from shapes alone.
    pub fn parameter_count(&self) -> usize {
        self.slots.iter().filter(|s| s.trainable).map(|s| s.rows * s.cols).sum()
    }

    /// `(name, rows, cols, trainable)` for every stored tensor, in order.
    pub fn tensor_shapes(&self) -> impl Iterator<Item = (&str, usize, usize, bool)> {
        self.slots.iter().map(|s| (s.name.as_str(), s.rows, s.cols, s.trainable))
    }

    /// Fresh parameters: fan-in uniform weights, unit norm scales, and
    /// Gaussian power-iteration vectors scaled to unit length.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for s in &self.slots {
            let value = match s.init {
                Init::Uniform { fan_in } => Matrix::uniform(s.rows, s.cols, 1.0 / (fan_in as f64).sqrt(), rng),
                Init::Ones => Matrix::filled(s.rows, s.cols, 1.0),
                Init::Zeros => Matrix::zeros(s.rows, s.cols),
                Init::UnitGaussian => {
                    let mut m = Matrix::from_vec(s.rows, s.cols, (0..s.rows * s.cols).map(|_| rng.sample(StandardNormal)).collect());
                    let n = m.frobenius_norm();
                    m.scale_in_place(1.0 / n);
                    m
                }
            };
            if s.trainable {
                store.add(s.name.clone(), value);
            } else {
                store.add_buffer(s.name.clone(), value);
            }
        }
        store
    }

    /// True if `store` has exactly this network's names and shapes.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        if store.len() != self.slots.len() {
            return Err(crate::Error::Shape(format!(
                "expected {} tensors, found {}",
                self.slots.len(),
                store.len()
            )));
        }
        for (i, s) in self.slots.iter().enumerate() {
            let id = ParamId(i);
            let m = store.get(id);
            if store.name(id) != s.name || m.shape() != (s.rows, s.cols) || store.is_trainable(id) != s.trainable {
                return Err(crate::Error::Shape(format!(
                    "tensor {i}: expected {} {}x{}, found {} {}x{}",
                    s.name,
                    s.rows,
                    s.cols,
                    store.name(id),
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn stem(&self) -> &[Dense; 2] {
        &self.layout.stem
    }

    pub fn blocks(&self) -> &[EmbedBlock] {
        &self.layout.blocks
    }

    pub fn attention(&self) -> &MultiHead {
        &self.layout.attention
    }

    pub fn head(&self) -> &DuelingHead {
        &self.layout.head
    }

    /// One power-iteration step on every spectral-normalized layer.
    pub fn power_iteration(&self, store: &mut ParamStore) {
        let h = &self.layout.head;
        for layer in [h.value_hidden, h.advantage_hidden] {
            let w = store.get(layer.linear.w).clone();
            let mut u = store.get(layer.u).as_slice().to_vec();
            let mut v = store.get(layer.v).as_slice().to_vec();
            power_iteration(&w, &mut u, &mut v);
            store.get_mut(layer.u).as_mut_slice().copy_from_slice(&u);
            store.get_mut(layer.v).as_mut_slice().copy_from_slice(&v);
        }
    }

    pub fn plan(&self, positions: &[Vec3]) -> ForwardPlan {
        let mut blocks = Vec::new();
        let mut current: Vec<Vec3> = positions.to_vec();
        for &n in &self.config.block_points() {
            let geo = EmbeddingGeometry::compute(&current, n, self.config.k).expect("config validated against point_cap");
            current = geo.fps_indices.iter().map(|&i| current[i]).collect();
            blocks.push(geo);
        }
        let order = (self.config.mode == Mode::NoEmbedding).then(|| {
            crate::geometry::farthest_point_sample(positions, positions.len()).expect("non-empty input")
        });
        ForwardPlan { blocks, order }
    }

    /// Action-by-atom logits on `tape`.
    pub fn forward_logits(&self, tape: &mut Tape, input: &InputTensor, plan: &ForwardPlan) -> Var {
        assert_eq!(input.rows(), self.config.point_cap, "input rows must equal point_cap");
        let x = tape.constant(input.features().clone());
        let mut h = stem(tape, &self.layout.stem, x);
        for (block, geo) in self.layout.blocks.iter().zip(&plan.blocks) {
            h = embed_block(tape, block, h, geo);
        }
        if let Some(order) = &plan.order {
            h = tape.gather_rows(h, order);
        }
        h = multi_head_attention(tape, &self.layout.attention, h, self.config.attention_norm);
        let pooled = global_maxpool_concat(tape, h);
        dueling_logits(tape, &self.layout.head, pooled, &self.config)
    }

    pub fn forward(&self, params: &ParamStore, input: &InputTensor) -> ValueDistribution {
        self.forward_planned(params, input, &self.plan(&input.positions()))
    }

    /// [`PointNet::forward`] with a precomputed plan for `input`.
    pub fn forward_planned(&self, params: &ParamStore, input: &InputTensor, plan: &ForwardPlan) -> ValueDistribution {
        let mut tape = Tape::with_params(params);
        let logits = self.forward_logits(&mut tape, input, plan);
        ValueDistribution { probs: softmax_rows(tape.value(logits)), support: self.config.support() }
    }
}

pub fn linear(tape: &mut Tape, l: &Linear, x: Var) -> Var {
    let w = tape.param(l.w);
    let y = tape.matmul(x, w);
    match l.b {
        Some(b) => {
            let b = tape.param(b);
            tape.add_row(y, b)
        }
        None => y,
    }
}

pub fn dense(tape: &mut Tape, d: &Dense, x: Var) -> Var {
    let y = linear(tape, &d.linear, x);
    norm_relu(tape, d, y)
}

fn norm_relu(tape: &mut Tape, d: &Dense, y: Var) -> Var {
    let (g, b) = (tape.param(d.gamma), tape.param(d.beta));
    let y = tape.point_norm(y, g, b);
    tape.relu(y)
}

/// `x · w / σ(w)` with `σ` read from the stored power-iteration vectors.
/// Dividing the product rather than the weight keeps the large flattened
/// weight matrices from being copied on every forward pass.
pub fn spectral_linear(tape: &mut Tape, l: &SpectralLinear, x: Var) -> Var {
    let store = tape.params().expect("spectral layer needs a parameter store");
    let (u, v) = (store.get(l.u).as_slice(), store.get(l.v).as_slice());
    let w = tape.param(l.linear.w);
    let y = tape.spectral_matmul(x, w, u, v);
    match l.linear.b {
        Some(b) => {
            let b = tape.param(b);
            tape.add_row(y, b)
        }
        None => y,
    }
}

/// Two per-point dense layers.
pub fn stem(tape: &mut Tape, layers: &[Dense; 2], x: Var) -> Var {
    let h = dense(tape, &layers[0], x);
    dense(tape, &layers[1], h)
}

/// Groups `k` neighbors around each FPS center, encodes
/// `[center, neighbor − center]`, and max-pools each group.
///
/// The first layer is evaluated as `center·(W_c − W_g) + neighbor·W_g`
/// with `W = [W_c; W_g]`, so the wide product runs once per point instead
/// of once per neighbor slot.
pub fn embed_block(tape: &mut Tape, block: &EmbedBlock, features: Var, geo: &EmbeddingGeometry) -> Var {
    let k = geo.neighbor_indices.first().map_or(1, Vec::len);
    let width = tape.shape(features).1;
    let w = tape.param(block.first.linear.w);
    let w_center = tape.slice_rows(w, 0, width);
    let w_group = tape.slice_rows(w, width, width);
    let w_diff = tape.sub(w_center, w_group);
    let centers = tape.gather_rows(features, &geo.fps_indices);
    let center_proj = tape.matmul(centers, w_diff);
    let point_proj = tape.matmul(features, w_group);
    let repeated: Vec<usize> = (0..geo.fps_indices.len()).flat_map(|s| std::iter::repeat_n(s, k)).collect();
    let c = tape.gather_rows(center_proj, &repeated);
    let n = tape.gather_rows(point_proj, &geo.flat_neighbors());
    let mut h = tape.add(c, n);
    if let Some(b) = block.first.linear.b {
        let b = tape.param(b);
        h = tape.add_row(h, b);
    }
    let h = norm_relu(tape, &block.first, h);
    let h = dense(tape, &block.second, h);
    tape.group_max(h, k)
}

pub fn offset_attention_head(tape: &mut Tape, head: &AttentionHead, x: Var, norm: AttentionNorm) -> Var {
    let q = linear(tape, &head.query, x);
    let k = linear(tape, &head.key, x);
    let v = linear(tape, &head.value, x);
    let energy = tape.matmul_t(q, false, k, true);
    let attn = match norm {
        AttentionNorm::OffsetL1 => {
            let a = tape.softmax_rows(energy);
            tape.column_l1_normalize(a)
        }
        AttentionNorm::ScaledSoftmax => {
            let d = tape.shape(q).1 as f64;
            let e = tape.scale(energy, 1.0 / d.sqrt());
            tape.softmax_rows(e)
        }
    };
    let out = match norm {
        AttentionNorm::OffsetL1 => tape.matmul_t(attn, true, v, false),
        AttentionNorm::ScaledSoftmax => tape.matmul(attn, v),
    };
    let offset = tape.sub(x, out);
    let t = dense(tape, &head.transform, offset);
    tape.add(x, t)
}

pub fn multi_head_attention(tape: &mut Tape, mh: &MultiHead, x: Var, norm: AttentionNorm) -> Var {
    let outs: Vec<Var> = mh.heads.iter().map(|h| offset_attention_head(tape, h, x, norm)).collect();
    let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
    linear(tape, &mh.merge, joined)
}

/// `(N, F)` to `(N, 2F)`: each row followed by the column-wise maximum.
pub fn global_maxpool_concat(tape: &mut Tape, x: Var) -> Var {
    let n = tape.shape(x).0;
    let m = tape.max_rows(x);
    let tiled = tape.tile_rows(m, n);
    tape.concat_cols(&[x, tiled])
}

/// Value and advantage streams combined per atom as `v + a − mean_a(a)`.
pub fn dueling_logits(tape: &mut Tape, head: &DuelingHead, pooled: Var, cfg: &NetworkConfig) -> Var {
    let flat = match cfg.tail {
        Tail::Flatten => {
            let (n, w) = tape.shape(pooled);
            tape.reshape(pooled, 1, n * w)
        }
        Tail::MaxPool => tape.max_rows(pooled),
    };
    let v = spectral_linear(tape, &head.value_hidden, flat);
    let v = tape.relu(v);
    let v = linear(tape, &head.value_out, v);
    let a = spectral_linear(tape, &head.advantage_hidden, flat);
    let a = tape.relu(a);
    let a = linear(tape, &head.advantage_out, a);
    let a = tape.reshape(a, cfg.action_count, cfg.atoms);
    combine_dueling(tape, v, a)
}

/// `logit(a, i) = v(i) + adv(a, i) − mean_a′ adv(a′, i)`.
pub fn combine_dueling(tape: &mut Tape, value: Var, advantage: Var) -> Var {
    let mean = tape.mean_rows(advantage);
    let centered = tape.sub_row(advantage, mean);
    tape.add_row(centered, value)
}
