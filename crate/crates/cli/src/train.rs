use std::path::PathBuf;

use anyhow::{Context, Result};
use pcrl::environment::episode_seed;
use pcrl::eval::{run_episode, Agent};
use pcrl::rl::{RunConfig, Trainer};
use serde::Serialize;

use crate::output::{create_dir, create_file, write_metadata};
use crate::{load_run, usage, Cli};

/// Seed stream for the post-training rollout.
pub const ROLLOUT_STREAM: u64 = 0xe7a1;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Total episodes; defaults to the config's `episodes`.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Continue from a trainer checkpoint instead of starting fresh.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Episodes between checkpoints; defaults to the config's value.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Suppress per-episode progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Serialize)]
struct Details<'a> {
    config: &'a RunConfig,
    episodes: usize,
    resumed_from: Option<&'a PathBuf>,
    deviations: Vec<String>,
}

pub fn run(cli: &Cli, args: &Args) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            if !path.exists() {
                return Err(usage(format!("checkpoint not found: {}", path.display())));
            }
            if cli.config.is_some() {
                return Err(usage("--resume takes its configuration from the checkpoint; drop --config"));
            }
            Trainer::resume(path)?
        }
        None => Trainer::new(load_run(cli.config.as_deref(), RunConfig::desk())?, cli.seed)?,
    };
    let run = trainer.config().clone();
    let episodes = args.episodes.unwrap_or(run.trainer.episodes);
    let every = args.checkpoint_every.unwrap_or(run.trainer.checkpoint_every).max(1);
    let out = &cli.out;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    std::fs::write(out.join("config.toml"), run.to_toml_string()).context("cannot write config echo")?;
    write_metadata(
        cli,
        "train",
        trainer.seed(),
        Details { config: &run, episodes, resumed_from: args.resume.as_ref(), deviations: trainer.deviations() },
    )?;

    let metrics_path = out.join("metrics.csv");
    trainer.train(episodes, |t, m| {
        if !args.quiet {
            println!(
                "episode {:>5}  return {:>4}  smoothed {:>8.2}  eps {:.3}  loss {}",
                m.episode,
                m.episode_return,
                m.smoothed_return,
                m.epsilon,
                m.loss_mean.map_or("-".to_string(), |l| format!("{l:.4}")),
            );
        }
        if (m.episode + 1) % every == 0 {
            t.save_checkpoint(ckpt_dir.join("latest.ckpt"))?;
            t.write_metrics_csv(std::fs::File::create(&metrics_path).map_err(|e| pcrl::Error::Io { path: metrics_path.clone(), source: e })?)?;
        }
        Ok(())
    })?;
    trainer.save_checkpoint(ckpt_dir.join("latest.ckpt"))?;
    trainer.save_checkpoint(ckpt_dir.join("final.ckpt"))?;
    trainer.write_metrics_csv(create_file(&metrics_path)?)?;

    let agent = Agent::Learned { net: trainer.network(), params: trainer.online() };
    let rollout = run_episode(&run.env, agent, episode_seed(trainer.seed(), ROLLOUT_STREAM))?;
    let traces = out.join("traces");
    create_dir(&traces)?;
    rollout.trace.save(traces.join("rl.json"))?;

    let last = trainer.history().last();
    println!(
        "trained {} episodes ({} env steps, {} updates); final smoothed return {:.2}; rollout return {}",
        trainer.history().len(),
        trainer.env_steps(),
        trainer.updates(),
        last.map_or(0.0, |m| m.smoothed_return),
        rollout.episode_return,
    );
    Ok(())
}
