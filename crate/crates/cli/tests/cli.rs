use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn pcrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcrl")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(out: &Path, episodes: &str) -> Output {
    let cfg = smoke_config();
    pcrl(&["--config", cfg.to_str().unwrap(), "--seed", "5", "--out", out.to_str().unwrap(), "train", "--episodes", episodes, "--quiet"])
}

#[test]
fn missing_config_exits_with_usage_status_and_names_the_file() {
    let o = pcrl(&["--config", "/nonexistent/run.toml", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.toml"), "{}", stderr(&o));
}

#[test]
fn same_seed_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train(out, "3");
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(String::from_utf8(read(&a)).unwrap().lines().count(), 4);
}

#[test]
fn export_round_trips_the_training_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let (run, out) = (dir.path().join("run"), dir.path().join("export"));
    assert!(train(&run, "2").status.success());
    let o = pcrl(&["--out", out.to_str().unwrap(), "export", "--run", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let steps = 30;
    let trajectory = std::fs::read_to_string(out.join("rl_trajectory.csv")).unwrap();
    assert_eq!(trajectory.lines().count(), 1 + steps + 1);

    let plys: Vec<_> = std::fs::read_dir(out.join("rl")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(plys.len(), steps + 1);
    for path in plys {
        let text = std::fs::read_to_string(&path).unwrap();
        let body = text.split("end_header\n").nth(1).unwrap();
        for line in body.lines() {
            let label = line.split_whitespace().nth(3).unwrap();
            assert!(["0", "1", "2"].contains(&label), "{label} in {}", path.display());
        }
        let points = pcrl::geometry::load_ply(&path).unwrap();
        let again = out.join("again.ply");
        pcrl::geometry::save_ply(&again, &points).unwrap();
        assert_eq!(std::fs::read_to_string(&again).unwrap(), text);
    }
    assert!(out.join("training_curve.csv").exists());
}

#[test]
fn export_without_traces_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcrl(&["--out", dir.path().join("x").to_str().unwrap(), "export", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no traces"), "{}", stderr(&o));
}

#[test]
fn gradcheck_scope_selects_one_block() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcrl(&["--out", dir.path().to_str().unwrap(), "gradcheck", "--scope", "stem"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<_> = stdout(&o).lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).map(String::from).collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("PASS stem"), "{lines:?}");

    let o = pcrl(&["--out", dir.path().to_str().unwrap(), "gradcheck", "--scope", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn injected_backward_fault_fails_the_gradient_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcrl(&["--out", dir.path().to_str().unwrap(), "gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn ablation_grid_parses_and_bad_strings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcrl(&["--out", dir.path().to_str().unwrap(), "ablation", "--sizes-only"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("parameters.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);

    let o = pcrl(&["--out", dir.path().to_str().unwrap(), "ablation", "--sizes-only", "--grid", "Cs32h1,Xs9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn greedy_collects_at_least_as_much_as_random() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let o = pcrl(&[
        "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(),
        "evaluate", "--episodes", "10", "--steps", "30",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let mean = |i: usize| summary["agents"][i]["mean_final_points"].as_f64().unwrap();
    assert_eq!(summary["agents"][0]["agent"], "greedy");
    assert!(mean(0) >= mean(1), "{summary}");
}

#[test]
fn learned_agent_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcrl(&["--out", dir.path().to_str().unwrap(), "evaluate", "--agents", "rl"]);
    assert_eq!(o.status.code(), Some(2));
}
