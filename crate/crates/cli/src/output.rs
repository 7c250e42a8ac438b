use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::Cli;

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Everything needed to repeat a command.
#[derive(Serialize)]
pub struct Metadata<'a, T: Serialize> {
    pub command: &'a str,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub seed: u64,
    pub workers: usize,
    pub config_path: Option<PathBuf>,
    pub details: T,
}

pub fn write_metadata<T: Serialize>(cli: &Cli, command: &str, seed: u64, details: T) -> Result<()> {
    create_dir(&cli.out)?;
    let meta = Metadata {
        command,
        argv: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        workers: cli.workers,
        config_path: cli.config.clone(),
        details,
    };
    write_json(&cli.out.join("metadata.json"), &meta)
}
