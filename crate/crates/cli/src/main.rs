use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use negosim_core::error::{AgentError, RunnerError, ScenarioError};
use negosim_core::runner::{
    execute_grid, load_runs, AgentPairing, ConditionSpec, ExecuteOptions, Grid, GridConfig, Progress,
    TreatmentName,
};
use negosim_core::scenario::{self, bundled, classify_issue, max_utility, min_utility, Scenario};
use negosim_core::stats::{build_report, write_report, Grouping};
use negosim_core::temporal::{ClockMode, Treatment};

/// Timed multi-issue negotiation experiments.
#[derive(Parser)]
#[command(name = "negosim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check scenario files and print their payoff structure.
    Validate {
        /// Scenario files or bundled names (`new_recruit`, `rubbermind`). Defaults to all bundled.
        scenarios: Vec<String>,
    },
    /// Execute an experiment grid.
    Run(RunArgs),
    /// Summarize results into CSV and markdown reports.
    Analyze {
        /// Results directory (a grid directory or the output root above it).
        results: PathBuf,
        /// Where to write reports. Defaults to `<results>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip corrupt record lines instead of failing.
        #[arg(long)]
        lenient: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Grid config file (JSON).
    #[arg(long)]
    grid: PathBuf,
    /// Agent pairing file; replaces the grid's `agents`.
    #[arg(long)]
    agents: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated time budgets in seconds, e.g. `240,300,360`.
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<u64>,
    /// Comma-separated treatments: control, timeaware, urgency, turnlimited, baseline.
    #[arg(long, value_delimiter = ',')]
    treatments: Vec<String>,
    /// Turn budgets for turnlimited, as `5..9` (inclusive) or `5,7,9`.
    #[arg(long)]
    turns: Option<String>,
    /// Repetitions per cell.
    #[arg(long)]
    reps: Option<u32>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Output root; results go to `<out>/<grid-hash>/`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an interrupted grid, skipping completed runs.
    #[arg(long)]
    resume: bool,
    /// With --resume, also re-run runs recorded as failed.
    #[arg(long)]
    retry_failed: bool,
    /// Stop after this many runs.
    #[arg(long)]
    limit: Option<usize>,
    /// Disable speech latency for every cell.
    #[arg(long)]
    no_latency: bool,
    /// Clock mode for every cell: simulated_speech, wall_clock or hybrid.
    #[arg(long)]
    clock_mode: Option<String>,
    /// Skip corrupt lines when analyzing after a live smoke run.
    #[arg(long)]
    lenient: bool,
    /// Live smoke run: at least 20 reps per cell against remote agents, then a full report.
    #[arg(long)]
    live_smoke: bool,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> Self {
        let code = match &e {
            RunnerError::Io { .. } => 3,
            RunnerError::Engine(_) => 2,
            RunnerError::Agent(AgentError::Transport(_) | AgentError::HttpStatus { .. }) => 2,
            RunnerError::Scenario(ScenarioError::Io { .. }) => 3,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        let code = if matches!(e, ScenarioError::Io { .. }) { 3 } else { 1 };
        CliError { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { scenarios } => cmd_validate(&scenarios),
        Command::Run(args) => cmd_run(args),
        Command::Analyze { results, out, lenient } => cmd_analyze(&results, out, lenient).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_named(entry: &str) -> Result<Scenario, CliError> {
    match bundled::by_name(entry) {
        Some(s) => Ok(s),
        None => scenario::load_scenario_file(entry).map_err(|e| {
            let mut err = CliError::from(e);
            if !err.message.starts_with(entry) {
                err.message = format!("{entry}: {}", err.message);
            }
            err
        }),
    }
}

fn cmd_validate(entries: &[String]) -> Result<u8, CliError> {
    let entries: Vec<String> = if entries.is_empty() {
        vec!["new_recruit".into(), "rubbermind".into()]
    } else {
        entries.to_vec()
    };
    for entry in &entries {
        let s = load_named(entry)?;
        println!("{} ({entry}): OK", s.name);
        for role in &s.roles {
            let table = s.payoff_table(role);
            println!(
                "  {role}: declared max {}, computed max {}, min {}, BATNA {}",
                s.declared_max[role],
                max_utility(&table),
                min_utility(&table),
                s.batna_points[role]
            );
        }
        for issue in &s.issues {
            let class = classify_issue(&s, &issue.id)?;
            println!(
                "  {:<20} {:?}{}",
                issue.id,
                class.kind,
                if class.ties { " (ties)" } else { "" }
            );
        }
    }
    Ok(0)
}

fn parse_treatment(name: &str) -> Result<TreatmentName, CliError> {
    let norm: String = name.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
    Ok(match norm.as_str() {
        "control" => TreatmentName::Control,
        "timeaware" => TreatmentName::TimeAware,
        "urgency" => TreatmentName::Urgency,
        "turnlimited" => TreatmentName::TurnLimited,
        "baseline" => TreatmentName::Baseline,
        _ => return Err(CliError::validation(format!("unknown treatment `{name}`"))),
    })
}

fn parse_turns(spec: &str) -> Result<Vec<u32>, CliError> {
    let bad = || CliError::validation(format!("cannot read turns `{spec}`; use `5..9` or `5,6,7`"));
    if let Some((a, b)) = spec.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

fn parse_clock(mode: &str) -> Result<ClockMode, CliError> {
    serde_json::from_value(serde_json::Value::String(mode.replace('-', "_")))
        .map_err(|_| CliError::validation(format!("unknown clock mode `{mode}`")))
}

/// Apply command-line overrides to a loaded grid config.
fn apply_overrides(cfg: &mut GridConfig, args: &RunArgs) -> Result<(), CliError> {
    if let Some(path) = &args.agents {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError { code: 3, message: format!("{}: {e}", path.display()) })?;
        let agents: AgentPairing = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        cfg.agents = Some(agents);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = args.reps {
        cfg.reps = reps;
    }
    if let Some(p) = args.parallelism {
        cfg.parallelism = p;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if args.no_latency {
        cfg.latency_enabled = false;
        cfg.conditions.iter_mut().for_each(|c| c.latency_enabled = Some(false));
    }
    if let Some(mode) = &args.clock_mode {
        let mode = parse_clock(mode)?;
        cfg.clock_mode = mode;
        cfg.conditions.iter_mut().for_each(|c| c.clock_mode = Some(mode));
    }
    let turns = args.turns.as_deref().map(parse_turns).transpose()?;

    if !args.treatments.is_empty() {
        let names = args.treatments.iter().map(|t| parse_treatment(t)).collect::<Result<Vec<_>, _>>()?;
        let budgets = if args.budgets.is_empty() {
            cfg.conditions.iter().find(|c| !c.budgets.is_empty()).map(|c| c.budgets.clone()).unwrap_or_default()
        } else {
            args.budgets.clone()
        };
        let turns = match turns {
            Some(t) => t,
            None => cfg.conditions.iter().find(|c| !c.turns.is_empty()).map(|c| c.turns.clone()).unwrap_or_default(),
        };
        let (limited, other): (Vec<_>, Vec<_>) = names.into_iter().partition(|n| *n == TreatmentName::TurnLimited);
        let mut conditions = Vec::new();
        if !other.is_empty() {
            conditions.push(ConditionSpec {
                treatments: other,
                budgets,
                turns: vec![],
                latency_enabled: None,
                clock_mode: None,
            });
        }
        if !limited.is_empty() {
            conditions.push(ConditionSpec {
                treatments: limited,
                budgets: vec![],
                turns,
                latency_enabled: None,
                clock_mode: None,
            });
        }
        cfg.conditions = conditions;
    } else {
        if !args.budgets.is_empty() {
            let mut touched = false;
            for c in cfg.conditions.iter_mut().filter(|c| !c.budgets.is_empty()) {
                c.budgets = args.budgets.clone();
                touched = true;
            }
            if !touched {
                return Err(CliError::validation("--budgets given but no condition in the grid takes budgets"));
            }
        }
        if let Some(t) = turns {
            let mut touched = false;
            for c in cfg.conditions.iter_mut().filter(|c| !c.turns.is_empty()) {
                c.turns = t.clone();
                touched = true;
            }
            if !touched {
                return Err(CliError::validation("--turns given but no condition in the grid is turn-limited"));
            }
        }
    }
    if args.live_smoke && args.reps.is_none() {
        cfg.reps = cfg.reps.max(20);
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<u8, CliError> {
    let mut cfg = GridConfig::from_file(&args.grid)?;
    apply_overrides(&mut cfg, &args)?;
    let base = args.grid.parent().map(Path::to_path_buf).unwrap_or_default();
    let grid = Grid::resolve(cfg, &base)?;
    if args.live_smoke {
        if !grid.agents.any_remote() {
            return Err(CliError::validation("--live-smoke needs at least one remote agent"));
        }
        if grid.config.reps < 20 {
            return Err(CliError::validation("--live-smoke needs at least 20 reps per cell"));
        }
    }
    let total = grid.cells.len() * grid.config.reps as usize;
    eprintln!(
        "grid {} ({}): {} cells x {} reps = {} runs -> {}",
        grid.config.name,
        grid.grid_hash(),
        grid.cells.len(),
        grid.config.reps,
        total,
        grid.output_root().display()
    );
    let progress = |p: &Progress| {
        if p.cell_done == p.cell_total {
            eprintln!("  {} done ({}/{} overall, {} failed)", p.cell_key, p.done, p.total, p.failed);
        }
    };
    let opts = ExecuteOptions {
        resume: args.resume,
        retry_failed: args.retry_failed,
        limit: args.limit,
        parallelism: args.parallelism,
        progress: Some(&progress),
        ..Default::default()
    };
    let summary = execute_grid(&grid, &opts)?;
    println!(
        "{} executed, {} skipped, {} failed, {} quarantined, {} remaining",
        summary.executed, summary.skipped, summary.failed, summary.quarantined, summary.remaining
    );
    println!("results: {}", summary.root.display());

    if args.live_smoke {
        let out = summary.root.join("report");
        let report = cmd_analyze(&summary.root, Some(out), args.lenient)?;
        for c in report.conditions.iter().filter(|c| c.grouping == Grouping::Treatment) {
            if let Some(p) = c.closure.proportion {
                println!("closure {} {}: {:.1}% ({}/{})", c.scenario, c.condition, p * 100.0, c.closure.k, c.closure.n);
            }
        }
        let rate = |t: Treatment| {
            report
                .conditions
                .iter()
                .filter(|c| c.grouping == Grouping::Treatment && c.config.treatment == t)
                .find_map(|c| c.closure.proportion)
        };
        if let (Some(c), Some(ta)) = (rate(Treatment::Control), rate(Treatment::TimeAware)) {
            println!(
                "directional check (reported, not asserted): TimeAware {} Control",
                if ta >= c { ">=" } else { "<" }
            );
        }
    }
    Ok(if summary.failed > 0 { 2 } else { 0 })
}

fn cmd_analyze(results: &Path, out: Option<PathBuf>, lenient: bool) -> Result<negosim_core::stats::Report, CliError> {
    let loaded = load_runs(results, lenient)?;
    if loaded.records.is_empty() {
        return Err(CliError::validation(format!("{}: no run records found", results.display())));
    }
    let report = build_report(&loaded)?;
    let out = out.unwrap_or_else(|| results.join("report"));
    write_report(&report, &out)?;
    println!(
        "{} runs ({} completed), {} offers, {} regression(s) -> {}",
        loaded.records.len(),
        loaded.completed().count(),
        report.offers.len(),
        report.regressions.len(),
        out.display()
    );
    for n in &report.notes {
        eprintln!("note: {n}");
    }
    Ok(report)
}
