use anyhow::Result;
use pcrl::network::{NetworkConfig, PointNet};
use pcrl::rl::{RunConfig, Trainer, TrainerConfig};
use serde::Serialize;

use crate::output::{create_dir, create_file, write_metadata};
use crate::{load_run, usage, Cli, ToleranceFailure};

pub const DEFAULT_GRID: [&str; 6] = ["Cs256s128h1", "Cs256s128h8", "Ss512s512h1", "Cs32h1", "Cs32h8", "Ss0s0h8"];

/// Point cap of the full-size room, used for the size table.
const FULL_POINT_CAP: usize = 512;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Comma-separated architecture strings.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GRID.map(String::from))]
    pub grid: Vec<String>,
    /// Episodes per run; defaults to the config's `episodes`.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Only write the parameter-count table.
    #[arg(long)]
    pub sizes_only: bool,
}

#[derive(Serialize)]
struct Details<'a> {
    config: &'a RunConfig,
    grid: &'a [String],
    episodes: usize,
}

struct Size {
    arch: String,
    full: usize,
    run: usize,
}

pub fn run(cli: &Cli, args: &Args) -> Result<()> {
    let base = load_run(cli.config.as_deref(), RunConfig::desk())?;
    let episodes = args.episodes.unwrap_or(base.trainer.episodes);
    // Parse and build every configuration before any training starts.
    let mut runs = Vec::new();
    let mut sizes = Vec::new();
    for arch in &args.grid {
        NetworkConfig::parse(arch).map_err(|e| usage(e.to_string()))?;
        let full_cfg = TrainerConfig { network: arch.clone(), ..TrainerConfig::default() }.network_config(FULL_POINT_CAP)?;
        let run = RunConfig { trainer: TrainerConfig { network: arch.clone(), ..base.trainer.clone() }, ..base.clone() };
        run.validate().map_err(|e| usage(format!("{arch}: {e}")))?;
        let run_net = PointNet::new(run.trainer.network_config(run.env.point_cap)?)?;
        sizes.push(Size { arch: arch.clone(), full: PointNet::new(full_cfg)?.parameter_count(), run: run_net.parameter_count() });
        runs.push(run);
    }
    create_dir(&cli.out)?;
    write_metadata(cli, "ablation", cli.seed, Details { config: &base, grid: &args.grid, episodes })?;

    let mut w = csv::Writer::from_writer(create_file(&cli.out.join("parameters.csv"))?);
    w.write_record(["config", "parameters_full_size", "parameters_run_size"])?;
    println!("{:<14} {:>14} {:>12}", "config", "params (F=256)", "params (run)");
    for s in &sizes {
        w.write_record([s.arch.clone(), s.full.to_string(), s.run.to_string()])?;
        println!("{:<14} {:>14} {:>12}", s.arch, s.full, s.run);
    }
    w.flush()?;
    if args.sizes_only {
        return Ok(());
    }

    let mut histories = Vec::new();
    for run in runs {
        let arch = run.trainer.network.clone();
        let mut trainer = Trainer::new(run, cli.seed)?;
        trainer.train(episodes, |_, _| Ok(()))?;
        trainer.write_metrics_csv(create_file(&cli.out.join(&arch).join("metrics.csv"))?)?;
        let last = trainer.history().last().map_or(0.0, |m| m.smoothed_return);
        println!("{arch:<14} final smoothed return {last:.2}");
        histories.push((arch, trainer.history().to_vec()));
    }

    let mut curves = csv::Writer::from_writer(create_file(&cli.out.join("curves.csv"))?);
    curves.write_record(["config", "episode", "return", "smoothed_return"])?;
    let mut table = csv::Writer::from_writer(create_file(&cli.out.join("summary.csv"))?);
    table.write_record(["config", "parameters", "final_smoothed_return", "mean_return_last_50"])?;
    for ((arch, h), size) in histories.iter().zip(&sizes) {
        for m in h {
            curves.write_record([arch.clone(), m.episode.to_string(), m.episode_return.to_string(), m.smoothed_return.to_string()])?;
        }
        let tail = &h[h.len().saturating_sub(50)..];
        let tail_mean = tail.iter().map(|m| m.episode_return as f64).sum::<f64>() / tail.len().max(1) as f64;
        let last = h.last().map_or(0.0, |m| m.smoothed_return);
        table.write_record([arch.clone(), size.run.to_string(), last.to_string(), tail_mean.to_string()])?;
    }
    curves.flush()?;
    table.flush()?;

    let placements = |h: &[pcrl::rl::EpisodeMetrics]| h.iter().map(|m| m.placement).collect::<Vec<_>>();
    if let Some((first, rest)) = histories.split_first() {
        for (arch, h) in rest {
            if placements(h) != placements(&first.1) {
                return Err(ToleranceFailure(format!("{arch} saw different rooms than {}", first.0)).into());
            }
        }
    }
    Ok(())
}
