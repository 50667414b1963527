use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_negosim"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn negosim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn grid_args<'a>(grid: &'a str, agents: &'a str, out: &'a str) -> Vec<&'a str> {
    vec!["run", "--grid", grid, "--agents", agents, "--out", out]
}

#[test]
fn validate_bundled() {
    let o = run(&["validate"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("declared max 16325, computed max 16325"));
    assert!(s.contains("declared max 19200, computed max 19200"));
    assert!(s.contains("rubbermind (rubbermind): OK"));
}

#[test]
fn validate_corrupt_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    let text = negosim_core::scenario::bundled::NEW_RECRUIT_JSON.replace("16325", "16000");
    std::fs::write(&path, text).unwrap();
    let o = run(&["validate", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("broken.json"), "{}", stderr(&o));

    let o = run(&["validate", "/nonexistent/scenario.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn run_resume_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let grid = configs().join("grid-main.json");
    let agents = configs().join("agents/scripted-demo.json");
    let mut args = grid_args(grid.to_str().unwrap(), agents.to_str().unwrap(), out);
    args.extend(["--reps", "6", "--seed", "7", "--budgets", "240,300,360"]);

    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("36 executed, 0 skipped, 0 failed"));

    // refuses to overwrite, then resumes cleanly
    assert_eq!(run(&args).status.code(), Some(1));
    args.push("--resume");
    let o = run(&args);
    assert!(stdout(&o).contains("0 executed, 36 skipped"), "{}", stdout(&o));

    let report = dir.path().join("report");
    let o = run(&["analyze", out, "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["summary.csv", "summary.md", "regression.csv", "closure_by_cell.csv", "offers.csv"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let reg = std::fs::read_to_string(report.join("regression.csv")).unwrap();
    let terms: Vec<&str> = reg.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(terms, ["intercept", "deadline_300", "deadline_360", "time_aware", "recipient_payoff_k"]);

    // byte-identical on repeat
    let first = std::fs::read(report.join("summary.md")).unwrap();
    run(&["analyze", out, "--out", report.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(report.join("summary.md")).unwrap());
}

#[test]
fn turn_limited_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let grid = configs().join("grid-main.json");
    let agents = configs().join("agents/scripted-agree.json");
    let mut args = grid_args(grid.to_str().unwrap(), agents.to_str().unwrap(), out);
    args.extend(["--treatments", "turnlimited", "--turns", "5..9", "--reps", "2"]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("5 cells x 2 reps = 10 runs"), "{}", stderr(&o));

    let report = dir.path().join("report");
    let o = run(&["analyze", out, "--out", report.to_str().unwrap()]);
    assert!(o.status.success());
    let closure = std::fs::read_to_string(report.join("closure_by_cell.csv")).unwrap();
    assert_eq!(closure.lines().count(), 6);
    assert!(closure.lines().skip(1).all(|l| l.contains(",2,2,1,")), "{closure}");
    // no timed cells, so no regression
    assert!(stderr(&o).contains("regression skipped"));
}

#[test]
fn bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["analyze", dir.path().to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));

    let grid = configs().join("grid-main.json");
    let agents = configs().join("agents/scripted-demo.json");
    let out = dir.path().to_str().unwrap();
    let mut args = grid_args(grid.to_str().unwrap(), agents.to_str().unwrap(), out);
    args.extend(["--treatments", "sometimes"]);
    assert_eq!(run(&args).status.code(), Some(1));

    let mut args = grid_args(grid.to_str().unwrap(), agents.to_str().unwrap(), out);
    args.push("--live-smoke");
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("remote"));
}

#[test]
fn help_lists_overrides() {
    let o = run(&["run", "--help"]);
    let s = stdout(&o);
    for flag in [
        "--grid", "--agents", "--budgets", "--treatments", "--turns", "--reps", "--parallelism", "--seed", "--out",
        "--resume", "--lenient", "--live-smoke",
    ] {
        assert!(s.contains(flag), "{flag} missing from help");
    }
    assert!(stdout(&run(&["analyze", "--help"])).contains("--lenient"));
}
