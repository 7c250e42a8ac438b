use anyhow::Result;
use pcrl::gradcheck::{run_suite, SUITES, TOLERANCE};
use serde::Serialize;

use crate::output::{write_json, write_metadata};
use crate::{usage, Cli, ToleranceFailure};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// `all` or one suite name.
    #[arg(long, default_value = "all")]
    pub scope: String,
    /// Corrupt one backward rule first; the run should then fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Serialize)]
struct Details<'a> {
    scope: &'a str,
    tolerance: f64,
}

pub fn run(cli: &Cli, args: &Args) -> Result<()> {
    let names: Vec<&str> = match args.scope.as_str() {
        "all" => SUITES.to_vec(),
        s if SUITES.contains(&s) => vec![s],
        s => return Err(usage(format!("unknown gradient suite `{s}`; expected all or one of {}", SUITES.join(", ")))),
    };
    write_metadata(cli, "gradcheck", cli.seed, Details { scope: &args.scope, tolerance: TOLERANCE })?;
    pcrl::autodiff::inject_backward_fault(args.inject_fault);
    let reports: Vec<_> = names.iter().filter_map(|n| run_suite(n, cli.seed)).collect();
    pcrl::autodiff::inject_backward_fault(false);

    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<24} max rel err {:.3e}  ({} entries, {} on kinks)", r.name, r.max_rel_error, r.entries, r.kinks);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    write_json(&cli.out.join("gradcheck.json"), &reports)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(ToleranceFailure(format!("gradient check above {TOLERANCE:e} in: {}", failed.join(", "))).into())
    }
}
