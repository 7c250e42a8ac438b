//! Per-episode step records, their CSV forms, and deterministic replay.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::EnvConfig;
use super::world::{Action, AgentPose, StartRule, StepOutcome, WorldState};
use crate::error::{Error, Result};
use crate::geometry::LabeledPoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub action: Action,
    pub executed_action: Action,
    pub reward: u32,
    pub target: usize,
    pub floor: usize,
    pub wall: usize,
    pub pose: AgentPose,
}

/// Everything needed to replay an episode exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub config: EnvConfig,
    pub start: AgentPose,
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn begin(world: &WorldState) -> Self {
        Self {
            seed: world.seed(),
            config: world.config().clone(),
            start: world.pose(),
            steps: Vec::new(),
        }
    }

    pub fn record(&mut self, world: &WorldState, outcome: &StepOutcome) {
        let c = world.coverage_metrics();
        self.steps.push(TraceStep {
            step: world.step_index(),
            action: outcome.attempted_action,
            executed_action: outcome.executed_action,
            reward: outcome.reward,
            target: c.target,
            floor: c.floor,
            wall: c.wall,
            pose: world.pose(),
        });
    }

    pub fn total_return(&self) -> u64 {
        self.steps.iter().map(|s| s.reward as u64).sum()
    }

    /// `step,action,executed_action,reward,target,floor,wall`
    pub fn write_steps_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::format("CSV", e.to_string());
        w.write_record(["step", "action", "executed_action", "reward", "target", "floor", "wall"])
            .map_err(csv_err)?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.action.name().to_string(),
                s.executed_action.name().to_string(),
                s.reward.to_string(),
                s.target.to_string(),
                s.floor.to_string(),
                s.wall.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::format("CSV", e.to_string()))
    }

    /// `step,x,y,heading`, starting with the initial pose at step 0.
    pub fn write_trajectory_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::format("CSV", e.to_string());
        w.write_record(["step", "x", "y", "heading"]).map_err(csv_err)?;
        let poses = std::iter::once((0, self.start)).chain(self.steps.iter().map(|s| (s.step, s.pose)));
        for (step, pose) in poses {
            w.write_record([
                step.to_string(),
                pose.cell[0].to_string(),
                pose.cell[1].to_string(),
                format!("{:?}", pose.heading),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::format("CSV", e.to_string()))
    }

    /// Re-runs the episode and returns the accumulated cloud after the
    /// initial scan and after every step. Fails if the replay diverges.
    pub fn replay_clouds(&self) -> Result<Vec<Vec<LabeledPoint>>> {
        let mut world = WorldState::new(self.seed, &self.config, StartRule::Fixed(self.start))?;
        let mut clouds = vec![world.cloud().points().to_vec()];
        for s in &self.steps {
            let executed = s.executed_action;
            let mut scripted = move |_: &WorldState| executed;
            let out = world.step(s.action, &mut scripted)?;
            if out.executed_action != s.executed_action || out.reward != s.reward || world.pose() != s.pose {
                return Err(Error::format(
                    "trace",
                    format!("replay diverged at step {}", s.step),
                ));
            }
            clouds.push(world.cloud().points().to_vec());
        }
        Ok(clouds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::format("trace", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("trace", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::new_episode;

    #[test]
    fn replay_reproduces_the_recorded_episode() {
        let cfg = EnvConfig { episode_length: 12, ..EnvConfig::default() };
        let mut world = new_episode(11, &cfg).unwrap();
        let mut trace = EpisodeTrace::begin(&world);
        let mut fallback = |w: &WorldState| w.legal_actions()[0];
        let mut i = 0;
        while !world.is_done() {
            let out = world.step(Action::ALL[(i * 5) % 6], &mut fallback).unwrap();
            trace.record(&world, &out);
            i += 1;
        }
        let clouds = trace.replay_clouds().unwrap();
        assert_eq!(clouds.len(), 13);
        assert_eq!(clouds.last().unwrap().as_slice(), world.cloud().points());

        let mut buf = Vec::new();
        trace.write_trajectory_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 13);
    }
}
