//! Parallel, resumable execution of an expanded grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::grid::{Grid, RunSpec};
use super::store::{
    self, cell_file, persist_run, read_transcript, scan_cell_file, transcript_rel, Manifest, RunRecord,
    RunStatus, QUARANTINE_DIR, SCENARIOS_DIR, TRANSCRIPTS_DIR,
};
use crate::agents::{AgentSpec, RateLimiter};
use crate::engine::{run_negotiation, RunOptions};
use crate::error::{AgentError, RunnerError};
use crate::metrics::NegotiationMetrics;
use crate::temporal::{MonotonicClock, TimeSource};
use crate::transcript::{Transcript, SCHEMA_VERSION};

/// Reported after every finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub cell_key: String,
    pub cell_done: usize,
    pub cell_total: usize,
    pub done: usize,
    pub total: usize,
    pub failed: usize,
}

pub type ProgressFn<'a> = &'a (dyn Fn(&Progress) + Sync);

#[derive(Default)]
pub struct ExecuteOptions<'a> {
    /// Continue an existing output directory instead of refusing it.
    pub resume: bool,
    /// Re-run records with status `failed` when resuming.
    pub retry_failed: bool,
    /// Stop after this many runs (the rest stay pending).
    pub limit: Option<usize>,
    /// Overrides the grid's parallelism.
    pub parallelism: Option<usize>,
    /// Time source for wall-clock modes; a fresh monotonic clock per run if unset.
    pub time_source: Option<Arc<dyn TimeSource>>,
    pub progress: Option<ProgressFn<'a>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecuteSummary {
    pub root: PathBuf,
    pub planned: usize,
    /// Runs already present from an earlier invocation.
    pub skipped: usize,
    pub executed: usize,
    pub failed: usize,
    /// Unusable lines or transcripts moved aside during resume.
    pub quarantined: usize,
    /// Runs still pending (nonzero only with `limit`).
    pub remaining: usize,
}

fn preflight(agents: &[&AgentSpec]) -> Result<(), RunnerError> {
    for spec in agents {
        spec.validate()?;
        if let AgentSpec::Remote(r) = spec {
            if std::env::var(&r.api_key_env).is_err() {
                return Err(AgentError::MissingApiKey(r.api_key_env.clone()).into());
            }
        }
    }
    Ok(())
}

fn quarantine(root: &Path, name: &str, lines: &[String]) -> Result<(), RunnerError> {
    if lines.is_empty() {
        return Ok(());
    }
    let dir = root.join(QUARANTINE_DIR);
    fs::create_dir_all(&dir).map_err(|e| RunnerError::io(&dir, e))?;
    let path = dir.join(format!("{name}.jsonl"));
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| RunnerError::io(&path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| RunnerError::io(&path, e))?;
    }
    Ok(())
}

/// Clean up an existing directory and return the run ids already done.
fn recover(root: &Path, grid: &Grid, runs: &[RunSpec], retry_failed: bool) -> Result<(BTreeSet<String>, usize), RunnerError> {
    let expected: BTreeMap<&str, &RunSpec> = runs.iter().map(|r| (r.run_id.as_str(), r)).collect();
    let mut done = BTreeSet::new();
    let mut quarantined = 0;

    let tdir = root.join(TRANSCRIPTS_DIR);
    for entry in fs::read_dir(&tdir).map_err(|e| RunnerError::io(&tdir, e))? {
        let p = entry.map_err(|e| RunnerError::io(&tdir, e))?.path();
        if p.extension().is_some_and(|e| e == "tmp") {
            fs::remove_file(&p).map_err(|e| RunnerError::io(&p, e))?;
        }
    }

    for cell in &grid.cells {
        let path = cell_file(root, &cell.key);
        if !path.exists() {
            continue;
        }
        let (records, bad) = scan_cell_file(&path)?;
        let mut rejected: Vec<String> = bad.iter().map(|b| b.text.clone()).collect();
        let mut kept = Vec::new();
        for r in records {
            let line = serde_json::to_string(&r).expect("record serializes");
            let valid = expected.get(r.run_id.as_str()).is_some_and(|s| s.cell_key == r.cell_key)
                && !done.contains(&r.run_id);
            let usable = valid
                && match (&r.status, &r.transcript) {
                    (RunStatus::Failed, _) => !retry_failed,
                    (RunStatus::Completed, Some(rel)) => read_transcript(&root.join(rel)).is_ok(),
                    (RunStatus::Completed, None) => false,
                };
            if usable {
                done.insert(r.run_id.clone());
                kept.push(line);
            } else {
                rejected.push(line);
            }
        }
        if !rejected.is_empty() {
            quarantined += rejected.len();
            log::warn!("{}: quarantined {} line(s)", path.display(), rejected.len());
            quarantine(root, &cell.key, &rejected)?;
            let mut body = kept.join("\n");
            if !body.is_empty() {
                body.push('\n');
            }
            store::write_atomic(&path, body.as_bytes())?;
        }
    }
    Ok((done, quarantined))
}

/// Execute every pending run of `grid`.
pub fn execute_grid(grid: &Grid, opts: &ExecuteOptions<'_>) -> Result<ExecuteSummary, RunnerError> {
    let specs: Vec<&AgentSpec> = grid
        .scenarios
        .values()
        .flat_map(|s| s.roles.iter().filter_map(|r| grid.agents.spec_for(r)))
        .collect();
    preflight(&specs)?;

    let root = grid.output_root();
    let runs = grid.expand();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        grid_hash: grid.grid_hash(),
        config: grid.config.clone(),
        cells: grid.cells.clone(),
        total_runs: runs.len(),
    };

    let existing = root.join(store::MANIFEST).exists();
    if existing && !opts.resume {
        let has_records = grid.cells.iter().any(|c| {
            fs::metadata(cell_file(&root, &c.key)).map(|m| m.len() > 0).unwrap_or(false)
        });
        if has_records {
            return Err(RunnerError::InvalidGrid(format!(
                "{} already holds results; resume it or choose another output directory",
                root.display()
            )));
        }
    }
    store::create_layout(&root)?;
    store::write_manifest(&root, &manifest)?;
    for (name, s) in &grid.scenarios {
        store::write_atomic(&root.join(SCENARIOS_DIR).join(format!("{name}.json")), s.to_json().as_bytes())?;
    }

    let (done, quarantined) = if existing {
        recover(&root, grid, &runs, opts.retry_failed)?
    } else {
        (BTreeSet::new(), 0)
    };

    let mut pending: Vec<&RunSpec> = runs.iter().filter(|r| !done.contains(&r.run_id)).collect();
    let remaining = match opts.limit {
        Some(n) if n < pending.len() => {
            let rest = pending.len() - n;
            pending.truncate(n);
            rest
        }
        _ => 0,
    };

    let per_cell_total = grid.config.reps as usize;
    let cell_done: Vec<AtomicUsize> = grid
        .cells
        .iter()
        .map(|c| AtomicUsize::new(runs.iter().filter(|r| r.cell_key == c.key && done.contains(&r.run_id)).count()))
        .collect();
    let cell_locks: Vec<Mutex<()>> = grid.cells.iter().map(|_| Mutex::new(())).collect();
    let overall = AtomicUsize::new(done.len());
    let executed = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let first_error: Mutex<Option<RunnerError>> = Mutex::new(None);
    let limiter = grid
        .config
        .rate_limit_per_sec
        .filter(|_| grid.agents.any_remote())
        .map(|r| Arc::new(RateLimiter::new(r, 1)));

    let workers = opts
        .parallelism
        .unwrap_or(grid.config.parallelism)
        .max(1)
        .min(pending.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = pending.get(i) else { return };
                let (record, transcript) = execute_one(grid, spec, limiter.clone(), opts.time_source.clone());
                let is_failed = record.status == RunStatus::Failed;
                let persisted = {
                    let _guard = cell_locks[spec.cell_index].lock().expect("cell lock poisoned");
                    persist_run(&root, &record, transcript.as_ref())
                };
                if let Err(e) = persisted {
                    abort.store(true, Ordering::SeqCst);
                    first_error.lock().expect("error slot").get_or_insert(e);
                    return;
                }
                executed.fetch_add(1, Ordering::SeqCst);
                if is_failed {
                    failed.fetch_add(1, Ordering::SeqCst);
                    log::warn!("{} failed: {}", record.run_id, record.error.as_deref().unwrap_or(""));
                }
                let cd = cell_done[spec.cell_index].fetch_add(1, Ordering::SeqCst) + 1;
                let od = overall.fetch_add(1, Ordering::SeqCst) + 1;
                if let Some(cb) = opts.progress {
                    cb(&Progress {
                        cell_key: spec.cell_key.clone(),
                        cell_done: cd,
                        cell_total: per_cell_total,
                        done: od,
                        total: runs.len(),
                        failed: failed.load(Ordering::SeqCst),
                    });
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("error slot") {
        return Err(e);
    }
    let executed = executed.into_inner();
    Ok(ExecuteSummary {
        root,
        planned: runs.len(),
        skipped: done.len(),
        executed,
        failed: failed.into_inner(),
        quarantined,
        remaining: remaining + (pending.len() - executed),
    })
}

/// Run one negotiation; never fails, failures become `failed` records.
pub fn execute_one(
    grid: &Grid,
    spec: &RunSpec,
    limiter: Option<Arc<RateLimiter>>,
    time_source: Option<Arc<dyn TimeSource>>,
) -> (RunRecord, Option<Transcript>) {
    let cell = &grid.cells[spec.cell_index];
    let scenario = grid.scenarios[&cell.scenario].clone();
    let mut record = RunRecord {
        schema_version: SCHEMA_VERSION,
        run_id: spec.run_id.clone(),
        cell_key: spec.cell_key.clone(),
        scenario: cell.scenario.clone(),
        treatment: cell.treatment.clone(),
        rep: spec.rep,
        seed: spec.seed,
        initiator: spec.initiator.clone(),
        status: RunStatus::Failed,
        error: None,
        metrics: None,
        transcript: None,
    };

    let mut agents = BTreeMap::new();
    for role in &scenario.roles {
        let built = grid
            .agents
            .spec_for(role)
            .ok_or_else(|| AgentError::InvalidSpec(format!("no agent for role `{role}`")))
            .and_then(|s| s.build(limiter.clone()));
        match built {
            Ok(a) => {
                agents.insert(role.clone(), a);
            }
            Err(e) => {
                record.error = Some(e.to_string());
                return (record, None);
            }
        }
    }

    let fallback;
    let source: Option<&dyn TimeSource> = if cell.treatment.clock_mode.uses_wall_time() {
        match &time_source {
            Some(t) => Some(t.as_ref()),
            None => {
                fallback = MonotonicClock::new();
                Some(&fallback)
            }
        }
    } else {
        None
    };
    let run_opts = RunOptions {
        max_format_retries: grid.config.max_format_retries,
        max_utterances: grid.config.max_utterances,
        time_source: source,
        run_id: spec.run_id.clone(),
        cell_key: spec.cell_key.clone(),
    };
    let transcript = match run_negotiation(scenario.clone(), &mut agents, &cell.treatment, &spec.initiator, spec.seed, &run_opts) {
        Ok(t) => t,
        Err(e) => {
            record.error = Some(e.to_string());
            return (record, None);
        }
    };
    record.transcript = Some(transcript_rel(&spec.run_id));
    match NegotiationMetrics::from_transcript(&scenario, &transcript) {
        Ok(m) => record.metrics = Some(m),
        Err(e) => record.error = Some(e.to_string()),
    }
    if let Some(err) = &transcript.outcome.error {
        record.error = Some(err.clone());
    } else if record.metrics.is_some() {
        record.status = RunStatus::Completed;
    }
    (record, Some(transcript))
}
