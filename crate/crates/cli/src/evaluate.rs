use std::path::PathBuf;

use anyhow::Result;
use pcrl::checkpoint::Checkpoint;
use pcrl::environment::EnvConfig;
use pcrl::eval::{
    evaluate, paired_final_difference, write_curve_csv, Agent, EvalSummary, REFERENCE_GREEDY_POINTS, REFERENCE_RL_POINTS,
};
use pcrl::network::network_from_checkpoint;
use pcrl::rl::{RunConfig, Trainer};
use serde::Serialize;

use crate::output::{create_dir, create_file, write_json, write_metadata};
use crate::{load_run, usage, Cli};

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentName {
    Greedy,
    Random,
    Rl,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Agents to run; `rl` needs --checkpoint.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [AgentName::Greedy, AgentName::Random])]
    pub agents: Vec<AgentName>,
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    /// Steps per episode.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
}

#[derive(Serialize)]
struct AgentSummary {
    agent: String,
    episodes: usize,
    mean_final_points: f64,
    final_ci_half_width: f64,
    mean_return: f64,
    best_final_points: usize,
    worst_final_points: usize,
    illegal_attempts: usize,
}

#[derive(Serialize)]
struct Summary {
    agents: Vec<AgentSummary>,
    /// Mean and half-width of greedy minus random final points.
    greedy_minus_random: Option<(f64, f64)>,
    reference_greedy_points: f64,
    reference_rl_points: f64,
}

#[derive(Serialize)]
struct Details<'a> {
    env: &'a EnvConfig,
    agents: &'a [AgentName],
    checkpoint: Option<&'a PathBuf>,
    episodes: usize,
    steps: usize,
}

pub fn run(cli: &Cli, args: &Args) -> Result<()> {
    let checkpoint = match &args.checkpoint {
        Some(p) if !p.exists() => return Err(usage(format!("checkpoint not found: {}", p.display()))),
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    if args.agents.contains(&AgentName::Rl) && checkpoint.is_none() {
        return Err(usage("agent `rl` needs --checkpoint"));
    }
    let stored = checkpoint.as_ref().map(Trainer::stored_run_config).transpose()?.flatten();
    let default_env = stored.map_or_else(EnvConfig::default, |r| r.env);
    let mut env = load_run(cli.config.as_deref(), RunConfig { env: default_env, ..RunConfig::default() })?.env;
    env.episode_length = args.steps;
    env.validate().map_err(|e| usage(e.to_string()))?;
    let learned = checkpoint.as_ref().map(network_from_checkpoint).transpose()?;

    create_dir(&cli.out)?;
    write_metadata(
        cli,
        "evaluate",
        cli.seed,
        Details { env: &env, agents: &args.agents, checkpoint: args.checkpoint.as_ref(), episodes: args.episodes, steps: args.steps },
    )?;

    let mut summaries = Vec::new();
    for name in &args.agents {
        let agent = match name {
            AgentName::Greedy => Agent::Greedy,
            AgentName::Random => Agent::Random,
            AgentName::Rl => {
                let (net, params) = learned.as_ref().expect("checked above");
                Agent::Learned { net, params }
            }
        };
        summaries.push(evaluate(&env, agent, cli.seed, args.episodes, cli.workers)?);
    }

    let refs: Vec<&EvalSummary> = summaries.iter().collect();
    write_curve_csv(&refs, create_file(&cli.out.join("curve.csv"))?)?;
    write_episodes_csv(&refs, &cli.out.join("episodes.csv"))?;
    let traces = cli.out.join("traces");
    for s in &summaries {
        if let Some((best, worst)) = s.best_and_worst() {
            create_dir(&traces)?;
            best.trace.save(traces.join(format!("{}_best.json", s.agent)))?;
            worst.trace.save(traces.join(format!("{}_worst.json", s.agent)))?;
        }
    }

    let find = |n: &str| summaries.iter().find(|s| s.agent == n);
    let greedy_minus_random = match (find("greedy"), find("random")) {
        (Some(g), Some(r)) => Some(paired_final_difference(g, r)?),
        _ => None,
    };
    let summary = Summary {
        agents: summaries.iter().map(agent_summary).collect(),
        greedy_minus_random,
        reference_greedy_points: REFERENCE_GREEDY_POINTS,
        reference_rl_points: REFERENCE_RL_POINTS,
    };
    write_json(&cli.out.join("summary.json"), &summary)?;

    println!("{:<8} {:>8} {:>14} {:>12} {:>8}", "agent", "episodes", "final points", "mean return", "illegal");
    for a in &summary.agents {
        println!(
            "{:<8} {:>8} {:>8.1} ±{:<5.1} {:>12.2} {:>8}",
            a.agent, a.episodes, a.mean_final_points, a.final_ci_half_width, a.mean_return, a.illegal_attempts
        );
    }
    if let Some((d, h)) = greedy_minus_random {
        println!("greedy − random final points: {d:.1} ± {h:.1} (95%)");
    }
    println!(
        "reference after 100 steps in the original simulator: greedy {REFERENCE_GREEDY_POINTS}, rl {REFERENCE_RL_POINTS} (context only)"
    );
    Ok(())
}

fn agent_summary(s: &EvalSummary) -> AgentSummary {
    let (best, worst) = s.best_and_worst().map_or((0, 0), |(b, w)| (b.final_points(), w.final_points()));
    AgentSummary {
        agent: s.agent.clone(),
        episodes: s.episodes.len(),
        mean_final_points: s.mean_final_points(),
        final_ci_half_width: s.ci_half_width.last().copied().unwrap_or(0.0),
        mean_return: s.mean_return(),
        best_final_points: best,
        worst_final_points: worst,
        illegal_attempts: s.episodes.iter().map(|e| e.illegal_attempts).sum(),
    }
}

fn write_episodes_csv(summaries: &[&EvalSummary], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(["agent", "episode", "seed", "initial_points", "final_points", "return", "illegal_attempts"])?;
    for s in summaries {
        for (i, e) in s.episodes.iter().enumerate() {
            w.write_record([
                s.agent.clone(),
                i.to_string(),
                e.seed.to_string(),
                e.points[0].to_string(),
                e.final_points().to_string(),
                e.episode_return.to_string(),
                e.illegal_attempts.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
