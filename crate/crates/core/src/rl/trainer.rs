//! The training loop, its metrics, and checkpoint/resume.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::compute_loss;
use super::optim::{Adam, AdamSettings};
use super::replay::{NStepAccumulator, ReplayBuffer, Snapshot, Transition};
use super::{epsilon_schedule, select_action, RunConfig};
use crate::checkpoint::{Checkpoint, RngState};
use crate::environment::{episode_seed, StartRule, WorldState};
use crate::error::{Error, Result};
use crate::network::PointNet;
use crate::params::ParamStore;

pub const METRICS_HEADER: [&str; 8] = [
    "episode",
    "steps",
    "return",
    "smoothed_return",
    "epsilon",
    "loss_mean",
    "target_final",
    "floor_final",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    /// Environment steps taken since the start of training.
    pub steps: u64,
    pub episode_return: u64,
    pub smoothed_return: f64,
    pub epsilon: f64,
    /// Mean batch loss over this episode's updates, if there were any.
    pub loss_mean: Option<f64>,
    pub target_final: usize,
    pub floor_final: usize,
    pub illegal_attempts: usize,
    pub placement: u64,
}

/// `x₀ = R₀`, then `x_{τ+1} = α·x_τ + (1 − α)·R_τ`.
pub fn smooth(previous: Option<f64>, value: f64, alpha: f64) -> f64 {
    match previous {
        None => value,
        Some(x) => alpha * x + (1.0 - alpha) * value,
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: String,
    run: RunConfig,
    seed: u64,
    env_steps: u64,
    updates: u64,
    learn_after: u64,
    rng: RngState,
    adam: AdamSettings,
    adam_steps: u64,
    history: Vec<EpisodeMetrics>,
    buffer_len: usize,
    buffer_capacity: usize,
    buffer_inserted: u64,
    deviations: Vec<String>,
}

/// Owns the online and target parameters, optimizer, replay buffer, and
/// the single RNG that drives exploration, fallback moves, and sampling.
pub struct Trainer {
    run: RunConfig,
    seed: u64,
    start: StartRule,
    net: PointNet,
    online: ParamStore,
    target: ParamStore,
    adam: Adam,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    env_steps: u64,
    updates: u64,
    learn_after: u64,
    history: Vec<EpisodeMetrics>,
}

impl Trainer {
    pub fn new(run: RunConfig, seed: u64) -> Result<Self> {
        run.validate()?;
        let t = &run.trainer;
        let net = PointNet::new(t.network_config(run.env.point_cap)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = net.init_params(&mut rng);
        let target = online.clone();
        let adam = Adam::new(t.learning_rate, t.adam_eps, t.grad_clip, &online);
        let buffer = ReplayBuffer::new(t.replay_capacity, t.prioritized);
        let learn_after = t.warmup;
        Ok(Self {
            run,
            seed,
            start: StartRule::Uniform,
            net,
            online,
            target,
            adam,
            buffer,
            rng,
            env_steps: 0,
            updates: 0,
            learn_after,
            history: Vec::new(),
        })
    }

    pub fn with_start_rule(mut self, start: StartRule) -> Self {
        self.start = start;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    pub fn network(&self) -> &PointNet {
        &self.net
    }

    pub fn online(&self) -> &ParamStore {
        &self.online
    }

    pub fn target(&self) -> &ParamStore {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn history(&self) -> &[EpisodeMetrics] {
        &self.history
    }

    /// Departures from the full Rainbow recipe in this run.
    pub fn deviations(&self) -> Vec<String> {
        let t = &self.run.trainer;
        let mut d = vec!["noisy networks replaced by epsilon-greedy exploration".to_string()];
        if !t.n_step_enabled {
            d.push("single-step returns".into());
        }
        if !t.prioritized {
            d.push("uniform replay".into());
        }
        d
    }

    /// Runs one episode, learning along the way once warm-up has passed.
    pub fn run_episode(&mut self) -> Result<EpisodeMetrics> {
        let index = self.history.len();
        let env = self.run.env.clone();
        let t = self.run.trainer.clone();
        let cap = env.point_cap;
        let mut world = WorldState::new(episode_seed(self.seed, index as u64), &env, self.start)?;
        let mut nstep = NStepAccumulator::new(t.effective_n_step(), t.gamma);
        let mut state = Arc::new(Snapshot::capture(&world));
        let mut losses = Vec::new();
        let mut illegal = 0;
        while !world.is_done() {
            let eps = epsilon_schedule(self.env_steps, t.epsilon_horizon);
            let action = select_action(&self.net, &self.online, &state.to_input(cap), eps, &mut self.rng);
            let rng = &mut self.rng;
            let mut fallback = |w: &WorldState| {
                let legal = w.legal_actions();
                legal[rng.random_range(0..legal.len())]
            };
            let out = world.step(action, &mut fallback)?;
            if let Some(attempt) = out.illegal_attempt {
                illegal += 1;
                self.buffer.push(Transition {
                    state: state.clone(),
                    action: attempt.action,
                    reward: attempt.reward,
                    next: state.clone(),
                    done: attempt.terminal,
                    discount: t.gamma,
                    illegal: true,
                });
            }
            let next = Arc::new(Snapshot::capture(&world));
            for tr in nstep.push(state, out.executed_action, out.reward as f64, next.clone(), out.done) {
                self.buffer.push(tr);
            }
            state = next;
            self.env_steps += 1;
            if self.env_steps >= self.learn_after && self.buffer.len() >= t.batch_size {
                losses.push(self.learn()?);
            }
        }
        let ret = world.episode_return();
        let counts = world.coverage_metrics();
        let previous = self.history.last().map(|m| m.smoothed_return);
        let m = EpisodeMetrics {
            episode: index,
            steps: self.env_steps,
            episode_return: ret,
            smoothed_return: smooth(previous, ret as f64, t.smoothing),
            epsilon: epsilon_schedule(self.env_steps, t.epsilon_horizon),
            loss_mean: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            target_final: counts.target,
            floor_final: counts.floor,
            illegal_attempts: illegal,
            placement: world.placement_fingerprint(),
        };
        self.history.push(m.clone());
        Ok(m)
    }

    /// One optimizer step on a sampled batch. Returns the batch loss.
    fn learn(&mut self) -> Result<f64> {
        let t = &self.run.trainer;
        self.net.power_iteration(&mut self.online);
        let idx = self.buffer.sample(t.batch_size, &mut self.rng);
        let weights = self.buffer.importance_weights(&idx, t.priority_beta);
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.buffer.get(i)).collect();
        let report = compute_loss(&self.net, &self.online, &self.target, &batch, &weights)?;
        if t.prioritized {
            let p: Vec<f64> = report.per_sample.iter().map(|l| l.powf(t.priority_alpha)).collect();
            self.buffer.update_priorities(&idx, &p);
        }
        self.adam.update(&mut self.online, &report.grads);
        self.updates += 1;
        if self.updates % t.target_sync == 0 {
            self.target = self.online.clone();
        }
        Ok(report.loss)
    }

    /// Trains until `episodes` episodes exist in the history, calling
    /// `on_episode` after each one.
    pub fn train(&mut self, episodes: usize, mut on_episode: impl FnMut(&Self, &EpisodeMetrics) -> Result<()>) -> Result<()> {
        while self.history.len() < episodes {
            let m = self.run_episode()?;
            on_episode(self, &m)?;
        }
        Ok(())
    }

    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::format("CSV", e.to_string());
        w.write_record(METRICS_HEADER).map_err(err)?;
        for m in &self.history {
            w.write_record([
                m.episode.to_string(),
                m.steps.to_string(),
                m.episode_return.to_string(),
                m.smoothed_return.to_string(),
                m.epsilon.to_string(),
                m.loss_mean.map(|l| l.to_string()).unwrap_or_default(),
                m.target_final.to_string(),
                m.floor_final.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::format("CSV", e.to_string()))
    }

    /// Everything except the replay contents.
    pub fn checkpoint(&self) -> Checkpoint {
        let meta = Meta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            run: self.run.clone(),
            seed: self.seed,
            env_steps: self.env_steps,
            updates: self.updates,
            learn_after: self.learn_after,
            rng: RngState::capture(&self.rng),
            adam: self.adam.settings.clone(),
            adam_steps: self.adam.steps(),
            history: self.history.clone(),
            buffer_len: self.buffer.len(),
            buffer_capacity: self.buffer.capacity(),
            buffer_inserted: self.buffer.inserted(),
            deviations: self.deviations(),
        };
        let mut c = Checkpoint::new(serde_json::json!({
            "network": self.net.config(),
            "trainer": serde_json::to_value(meta).expect("metadata serializes"),
        }));
        c.push_store("", &self.online);
        c.push_store("target.", &self.target);
        self.adam.push_to(&self.online, &mut c);
        c
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// The run configuration stored in a trainer checkpoint, if it has one.
    pub fn stored_run_config(c: &Checkpoint) -> Result<Option<RunConfig>> {
        match c.metadata.get("trainer").and_then(|t| t.get("run")) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::format("checkpoint", format!("run config: {e}"))),
        }
    }

    /// Restores a run. The replay buffer starts empty, so learning waits
    /// for a fresh warm-up.
    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        let meta: Meta = serde_json::from_value(c.metadata["trainer"].clone())
            .map_err(|e| Error::format("checkpoint", format!("trainer state: {e}")))?;
        let mut t = Self::new(meta.run, meta.seed)?;
        c.fill_store("", &mut t.online)?;
        c.fill_store("target.", &mut t.target)?;
        t.adam = Adam::restore(meta.adam, meta.adam_steps, &t.online, &c)?;
        t.rng = meta.rng.restore();
        t.env_steps = meta.env_steps;
        t.updates = meta.updates;
        t.learn_after = meta.env_steps + t.run.trainer.warmup;
        t.history = meta.history;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::EnvConfig;

    fn tiny() -> RunConfig {
        let mut r = RunConfig::desk();
        r.env = EnvConfig { episode_length: 10, sensor_rays_h: 16, sensor_rays_v: 10, point_cap: 32, ..EnvConfig::reduced() };
        r.trainer.network = "Cs8h2".into();
        r.trainer.feature_dim = 8;
        r.trainer.hidden_dim = 8;
        r.trainer.neighbors = 4;
        r.trainer.atoms = 11;
        r.trainer.warmup = 25;
        r.trainer.batch_size = 4;
        r.trainer.target_sync = 7;
        r.trainer.epsilon_horizon = 60;
        r
    }

    #[test]
    fn smoothing_converges_to_a_constant() {
        let mut x = Some(0.0);
        for _ in 0..3000 {
            x = Some(smooth(x, 5.0, 0.99));
        }
        assert!((x.unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(smooth(None, 3.0, 0.99), 3.0);
    }

    #[test]
    fn no_updates_before_warmup_and_target_changes_only_at_sync() {
        let mut t = Trainer::new(tiny(), 1).unwrap();
        let mut last_target = t.target().fingerprint();
        let mut last_updates = 0;
        t.train(6, |tr, _| {
            if tr.env_steps() < 25 {
                assert_eq!(tr.updates(), 0);
            }
            let fp = tr.target().fingerprint();
            if fp != last_target {
                // A sync happened somewhere in (last_updates, updates].
                assert!((last_updates + 1..=tr.updates()).any(|u| u % 7 == 0));
            }
            last_target = fp;
            last_updates = tr.updates();
            Ok(())
        })
        .unwrap();
        assert!(t.updates() > 0);
    }

    #[test]
    fn identical_seeds_give_identical_metrics() {
        let run = |seed| {
            let mut t = Trainer::new(tiny(), seed).unwrap();
            t.train(4, |_, _| Ok(())).unwrap();
            let mut buf = Vec::new();
            t.write_metrics_csv(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert_eq!(a.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(a.lines().count(), 5);
    }

    #[test]
    fn resume_restores_state_but_not_the_buffer() {
        let mut t = Trainer::new(tiny(), 5).unwrap();
        t.train(4, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        t.save_checkpoint(&path).unwrap();
        let r = Trainer::resume(&path).unwrap();
        assert_eq!(r.online(), t.online());
        assert_eq!(r.target(), t.target());
        assert_eq!(r.history(), t.history());
        assert_eq!(r.env_steps(), t.env_steps());
        assert!(r.buffer().is_empty());
        assert_eq!(r.learn_after, t.env_steps() + 25);
        assert_eq!(RngState::capture(&r.rng), RngState::capture(&t.rng));
    }
}
