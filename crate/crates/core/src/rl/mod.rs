//! Distributional double-Q learning with collision-aware replay.

mod loss;
mod optim;
mod replay;
mod trainer;

pub use loss::{compute_loss, cross_entropy, target_distribution, LossReport};
pub use optim::Adam;
pub use replay::{NStepAccumulator, ReplayBuffer, Snapshot, SumTree, Transition, FIXED_SCALE};
pub use trainer::{smooth, EpisodeMetrics, Trainer, METRICS_HEADER};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Action, EnvConfig};
use crate::error::{Error, Result};
use crate::network::{AttentionNorm, InputTensor, NetworkConfig, PointNet, Tail};
use crate::params::ParamStore;

/// Learner hyperparameters. Network widths live here too, since the
/// architecture string only fixes the sampling pattern and head count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub network: String,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub neighbors: usize,
    pub attention_norm: AttentionNorm,
    pub tail: Tail,
    pub v_min: f64,
    pub v_max: f64,
    pub atoms: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub target_sync: u64,
    pub replay_capacity: usize,
    pub warmup: u64,
    pub epsilon_horizon: u64,
    pub episodes: usize,
    pub n_step_enabled: bool,
    pub n_step: usize,
    pub prioritized: bool,
    pub priority_alpha: f64,
    pub priority_beta: f64,
    pub smoothing: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            network: "Cs256s128h8".into(),
            feature_dim: 256,
            hidden_dim: 256,
            neighbors: 32,
            attention_norm: AttentionNorm::OffsetL1,
            tail: Tail::Flatten,
            v_min: 0.0,
            v_max: 415.0,
            atoms: 51,
            gamma: 0.99,
            learning_rate: 6.25e-5,
            adam_eps: 1.5e-4,
            grad_clip: 10.0,
            batch_size: 32,
            target_sync: 2000,
            replay_capacity: 100_000,
            warmup: 15_000,
            epsilon_horizon: 200_000,
            episodes: 5000,
            n_step_enabled: false,
            n_step: 3,
            prioritized: false,
            priority_alpha: 0.5,
            priority_beta: 0.4,
            smoothing: 0.99,
            checkpoint_every: 100,
        }
    }
}

impl TrainerConfig {
    pub fn network_config(&self, point_cap: usize) -> Result<NetworkConfig> {
        let c = NetworkConfig {
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            k: self.neighbors,
            atoms: self.atoms,
            v_min: self.v_min,
            v_max: self.v_max,
            action_count: Action::COUNT,
            point_cap,
            attention_norm: self.attention_norm,
            tail: self.tail,
            ..NetworkConfig::parse(&self.network)?
        };
        c.validate()?;
        Ok(c)
    }

    pub fn effective_n_step(&self) -> usize {
        if self.n_step_enabled { self.n_step } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.v_min < self.v_max) || self.atoms < 2 {
            return bad("need v_min < v_max and atoms >= 2");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.epsilon_horizon == 0 || self.target_sync == 0 {
            return bad("batch_size, replay_capacity, epsilon_horizon and target_sync must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.smoothing) {
            return bad("learning_rate must be positive and smoothing in [0, 1)");
        }
        if self.n_step == 0 {
            return bad("n_step must be at least 1");
        }
        Ok(())
    }
}

/// Environment plus learner settings, as read from one TOML file with
/// `[env]` and `[trainer]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    /// Reduced room with a small network and short schedules.
    pub fn desk() -> Self {
        Self {
            env: EnvConfig::reduced(),
            trainer: TrainerConfig {
                network: "Cs32h8".into(),
                feature_dim: 32,
                hidden_dim: 64,
                neighbors: 16,
                learning_rate: 5e-4,
                batch_size: 16,
                target_sync: 500,
                replay_capacity: 20_000,
                warmup: 1500,
                epsilon_horizon: 20_000,
                episodes: 500,
                ..TrainerConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.trainer.validate()?;
        self.trainer.network_config(self.env.point_cap)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `max(0, 1 − step / horizon)`.
pub fn epsilon_schedule(step: u64, horizon: u64) -> f64 {
    assert!(horizon > 0, "epsilon horizon must be positive");
    (1.0 - step as f64 / horizon as f64).max(0.0)
}

/// ε-greedy over all six actions. Exploration may pick an illegal move on
/// purpose; the environment then records the attempt.
pub fn select_action<R: Rng + ?Sized>(
    net: &PointNet,
    params: &ParamStore,
    input: &InputTensor,
    epsilon: f64,
    rng: &mut R,
) -> Action {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Action::ALL[rng.random_range(0..Action::COUNT)];
    }
    Action::from_index(net.forward(params, input).greedy_action()).expect("network has one row per action")
}

/// Categorical projection of `r + γ·z` onto the fixed support. Each shifted
/// atom splits its mass between the two support atoms around it.
pub fn c51_project(next: &[f64], reward: f64, done: bool, gamma: f64, support: &[f64]) -> Result<Vec<f64>> {
    let n = support.len();
    if next.len() != n || n < 2 {
        return Err(Error::Contract(format!("distribution of {} atoms on a support of {n}", next.len())));
    }
    let total: f64 = next.iter().sum();
    if next.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("next-state distribution sums to {total}")));
    }
    let (v_min, v_max) = (support[0], support[n - 1]);
    let steps = (n - 1) as f64;
    let mut out = vec![0.0; n];
    let mut place = |tz: f64, p: f64| {
        let b = ((tz.clamp(v_min, v_max) - v_min) * steps / (v_max - v_min)).clamp(0.0, steps);
        // Snap positions that only miss an atom through rounding.
        let b = if (b - b.round()).abs() < 1e-10 { b.round() } else { b };
        let (l, u) = (b.floor() as usize, b.ceil() as usize);
        if l == u {
            out[l] += p;
        } else {
            out[l] += p * (u as f64 - b);
            out[u] += p * (b - l as f64);
        }
    };
    if done {
        place(reward, 1.0);
    } else {
        for (z, p) in support.iter().zip(next) {
            place(reward + gamma * z, *p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::support;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon_schedule(0, 200_000), 1.0);
        assert_eq!(epsilon_schedule(100_000, 200_000), 0.5);
        assert_eq!(epsilon_schedule(200_000, 200_000), 0.0);
        assert_eq!(epsilon_schedule(300_000, 200_000), 0.0);
    }

    #[test]
    fn projection_examples() {
        let z = support(0.0, 415.0, 51);
        let uniform = vec![1.0 / 51.0; 51];
        let top = c51_project(&uniform, 415.0, true, 0.99, &z).unwrap();
        assert_eq!(top[50], 1.0);
        let split = c51_project(&uniform, 4.15, false, 0.0, &z).unwrap();
        assert!((split[0] - 0.5).abs() < 1e-12 && (split[1] - 0.5).abs() < 1e-12);
        let over = c51_project(&uniform, 1000.0, true, 0.99, &z).unwrap();
        assert_eq!(over[50], 1.0);
        assert!(c51_project(&[0.5; 51], 1.0, false, 0.9, &z).is_err());
        assert!(c51_project(&[1.0; 3], 1.0, false, 0.9, &z).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert!(RunConfig::from_toml_str("[trainer]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[trainer]\nnetwork = \"Cs32x\"").is_err());
        let partial = RunConfig::from_toml_str("[trainer]\ngamma = 0.9").unwrap();
        assert_eq!(partial.trainer.gamma, 0.9);
        assert_eq!(partial.env, EnvConfig::default());
    }

    #[test]
    fn exploration_is_uniform_over_six_actions() {
        let net = PointNet::new(NetworkConfig { point_cap: 8, feature_dim: 4, hidden_dim: 4, atoms: 3, k: 2, ..NetworkConfig::parse("Cs4h1").unwrap() }).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let input = crate::network::build_input(&[], crate::environment::AgentPose { cell: [2, 2], heading: crate::environment::Heading::North }, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 6];
        for _ in 0..60_000 {
            counts[select_action(&net, &params, &input, 1.0, &mut rng).index()] += 1;
        }
        let se = (60_000.0f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 3.0 * se, "{counts:?}");
        }
    }
}
