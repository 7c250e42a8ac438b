use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcrl::environment::EpisodeTrace;
use pcrl::geometry::save_ply;
use serde::Serialize;

use crate::output::{create_dir, create_file, write_metadata};
use crate::Cli;

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum What {
    /// One PLY file per step of every trace.
    Ply,
    /// Step tables and learning/evaluation curves.
    Csv,
    /// Pose per step of every trace.
    Trajectory,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Directory written by `train` or `evaluate`.
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [What::Ply, What::Csv, What::Trajectory])]
    pub what: Vec<What>,
}

#[derive(Serialize)]
struct Details<'a> {
    run: &'a Path,
    what: &'a [What],
    traces: Vec<String>,
}

fn find_traces(run: &Path) -> Result<Vec<(String, PathBuf)>> {
    let dir = run.join("traces");
    let entries = std::fs::read_dir(&dir).with_context(|| format!("no traces in {}: cannot read {}", run.display(), dir.display()))?;
    let mut traces = Vec::new();
    for e in entries {
        let path = e?.path();
        if path.extension().is_some_and(|x| x == "json") {
            let name = path.file_stem().expect("has extension").to_string_lossy().into_owned();
            traces.push((name, path));
        }
    }
    traces.sort();
    if traces.is_empty() {
        bail!("no traces in {}", dir.display());
    }
    Ok(traces)
}

pub fn run(cli: &Cli, args: &Args) -> Result<()> {
    let traces = find_traces(&args.run)?;
    create_dir(&cli.out)?;
    write_metadata(
        cli,
        "export",
        cli.seed,
        Details { run: &args.run, what: &args.what, traces: traces.iter().map(|t| t.0.clone()).collect() },
    )?;
    let mut written = 0usize;
    for (name, path) in &traces {
        let trace = EpisodeTrace::load(path)?;
        if args.what.contains(&What::Ply) {
            let dir = cli.out.join(name);
            create_dir(&dir)?;
            for (step, cloud) in trace.replay_clouds()?.iter().enumerate() {
                save_ply(dir.join(format!("step_{step:03}.ply")), cloud)?;
                written += 1;
            }
        }
        if args.what.contains(&What::Trajectory) {
            trace.write_trajectory_csv(create_file(&cli.out.join(format!("{name}_trajectory.csv")))?)?;
            written += 1;
        }
        if args.what.contains(&What::Csv) {
            trace.write_steps_csv(create_file(&cli.out.join(format!("{name}_steps.csv")))?)?;
            written += 1;
        }
    }
    if args.what.contains(&What::Csv) {
        written += export_curves(&args.run, &cli.out)?;
    }
    println!("wrote {written} files to {}", cli.out.display());
    Ok(())
}

/// Training curve from `metrics.csv` and the evaluation curve, when present.
fn export_curves(run: &Path, out: &Path) -> Result<usize> {
    let mut n = 0;
    let metrics = run.join("metrics.csv");
    if metrics.exists() {
        let mut r = csv::Reader::from_path(&metrics)?;
        let headers = r.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name).with_context(|| format!("{} lacks `{name}`", metrics.display()));
        let (e, ret, sm) = (col("episode")?, col("return")?, col("smoothed_return")?);
        let mut w = csv::Writer::from_writer(create_file(&out.join("training_curve.csv"))?);
        w.write_record(["episode", "return", "smoothed_return"])?;
        for rec in r.records() {
            let rec = rec?;
            w.write_record([&rec[e], &rec[ret], &rec[sm]])?;
        }
        w.flush()?;
        n += 1;
    }
    let curve = run.join("curve.csv");
    if curve.exists() {
        std::fs::copy(&curve, out.join("evaluation_curve.csv"))?;
        n += 1;
    }
    Ok(n)
}
