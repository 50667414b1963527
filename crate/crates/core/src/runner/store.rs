//! On-disk layout of a grid's results.
//!
//! ```text
//! <output_dir>/<grid-hash>/
//!     manifest.json
//!     scenarios/<name>.json
//!     cells/<cell-key>.jsonl        one RunRecord per line
//!     transcripts/<run-id>.jsonl
//!     quarantine/
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::grid::{Cell, GridConfig};
use crate::engine::OutcomeKind;
use crate::error::RunnerError;
use crate::metrics::NegotiationMetrics;
use crate::scenario::{load_scenario_file, Points, Scenario};
use crate::temporal::TreatmentConfig;
use crate::transcript::{Transcript, SCHEMA_VERSION};

pub const MANIFEST: &str = "manifest.json";
pub const CELLS_DIR: &str = "cells";
pub const TRANSCRIPTS_DIR: &str = "transcripts";
pub const SCENARIOS_DIR: &str = "scenarios";
pub const QUARANTINE_DIR: &str = "quarantine";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Agent or transport failure; excluded from rates and tests.
    Failed,
}

/// One line of a cell file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub cell_key: String,
    pub scenario: String,
    pub treatment: TreatmentConfig,
    pub rep: u32,
    pub seed: u64,
    pub initiator: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<NegotiationMetrics>,
    /// Path of the transcript relative to the grid directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
}

impl RunRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn outcome(&self) -> Option<OutcomeKind> {
        self.metrics.as_ref().map(|m| m.outcome)
    }

    pub fn closure(&self) -> Option<bool> {
        self.metrics.as_ref().map(|m| m.closure)
    }

    pub fn payoff(&self, role: &str) -> Option<Points> {
        self.metrics.as_ref().and_then(|m| m.payoffs.get(role).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub grid_hash: String,
    pub config: GridConfig,
    pub cells: Vec<Cell>,
    pub total_runs: usize,
}

pub fn cell_file(root: &Path, cell_key: &str) -> PathBuf {
    root.join(CELLS_DIR).join(format!("{cell_key}.jsonl"))
}

pub fn transcript_rel(run_id: &str) -> String {
    format!("{TRANSCRIPTS_DIR}/{run_id}.jsonl")
}

pub(crate) fn create_layout(root: &Path) -> Result<(), RunnerError> {
    for d in [CELLS_DIR, TRANSCRIPTS_DIR, SCENARIOS_DIR] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|e| RunnerError::io(&p, e))?;
    }
    Ok(())
}

/// Write `contents` to `path` atomically via a sibling temp file.
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunnerError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| RunnerError::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| RunnerError::io(&tmp, e))?;
    f.sync_all().map_err(|e| RunnerError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunnerError::io(path, e))
}

pub(crate) fn write_manifest(root: &Path, manifest: &Manifest) -> Result<(), RunnerError> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&root.join(MANIFEST), json.as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<Manifest, RunnerError> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| RunnerError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| RunnerError::CorruptLine {
        path: path.display().to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(RunnerError::SchemaVersion {
            path: path.display().to_string(),
            found: m.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(m)
}

/// Write the transcript, then append its record as a single line.
pub(crate) fn persist_run(
    root: &Path,
    record: &RunRecord,
    transcript: Option<&Transcript>,
) -> Result<(), RunnerError> {
    if let (Some(t), Some(rel)) = (transcript, &record.transcript) {
        write_atomic(&root.join(rel), t.to_jsonl().as_bytes())?;
    }
    let path = cell_file(root, &record.cell_key);
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| RunnerError::io(&path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| RunnerError::io(&path, e))?;
    f.flush().map_err(|e| RunnerError::io(&path, e))
}

/// A line that could not be used.
#[derive(Debug, Clone, PartialEq)]
pub struct BadLine {
    pub path: PathBuf,
    pub line: usize,
    pub text: String,
    pub message: String,
}

fn parse_record(path: &Path, line_no: usize, text: &str) -> Result<RunRecord, BadLine> {
    let bad = |message: String| BadLine {
        path: path.to_path_buf(),
        line: line_no,
        text: text.to_string(),
        message,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(bad(format!("schema version {version:?}, expected {SCHEMA_VERSION}")));
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

/// Read one cell file. Returns good records and unusable lines separately.
pub fn scan_cell_file(path: &Path) -> Result<(Vec<RunRecord>, Vec<BadLine>), RunnerError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((vec![], vec![])),
        Err(e) => return Err(RunnerError::io(path, e)),
    };
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| RunnerError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(path, i + 1, &line) {
            Ok(r) => good.push(r),
            Err(b) => bad.push(b),
        }
    }
    Ok((good, bad))
}

/// A stored metric that disagrees with one recomputed from the transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub run_id: String,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct LoadedRuns {
    pub records: Vec<RunRecord>,
    pub mismatches: Vec<Mismatch>,
    pub skipped: Vec<BadLine>,
    pub scenarios: BTreeMap<String, Arc<Scenario>>,
    pub transcript_paths: BTreeMap<String, PathBuf>,
}

impl LoadedRuns {
    pub fn completed(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(|r| r.is_completed())
    }

    pub fn transcript(&self, run_id: &str) -> Option<Result<Transcript, RunnerError>> {
        self.transcript_paths.get(run_id).map(|p| read_transcript(p))
    }
}

/// Grid directories under `path`: the path itself if it holds a manifest,
/// otherwise each immediate subdirectory that does.
pub fn grid_dirs(path: &Path) -> Result<Vec<PathBuf>, RunnerError> {
    if path.join(MANIFEST).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let entries = fs::read_dir(path).map_err(|e| RunnerError::io(path, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| RunnerError::io(path, e))?;
        if entry.path().join(MANIFEST).is_file() {
            out.push(entry.path());
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(RunnerError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no manifest.json found"),
        ));
    }
    Ok(out)
}

pub fn read_transcript(path: &Path) -> Result<Transcript, RunnerError> {
    let f = File::open(path).map_err(|e| RunnerError::io(path, e))?;
    Transcript::read_jsonl(BufReader::new(f)).map_err(|e| RunnerError::CorruptLine {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

/// Load every record under `path` and re-derive metrics from transcripts.
///
/// Without `lenient`, the first corrupt line is an error. With it, corrupt
/// lines are skipped and listed in `skipped`.
pub fn load_runs(path: &Path, lenient: bool) -> Result<LoadedRuns, RunnerError> {
    let mut loaded = LoadedRuns::default();
    for root in grid_dirs(path)? {
        let manifest = read_manifest(&root)?;
        for cell in &manifest.cells {
            if !loaded.scenarios.contains_key(&cell.scenario) {
                let p = root.join(SCENARIOS_DIR).join(format!("{}.json", cell.scenario));
                loaded
                    .scenarios
                    .insert(cell.scenario.clone(), Arc::new(load_scenario_file(&p)?));
            }
            let file = cell_file(&root, &cell.key);
            let (records, bad) = scan_cell_file(&file)?;
            if let Some(b) = bad.first() {
                if !lenient {
                    return Err(RunnerError::CorruptLine {
                        path: b.path.display().to_string(),
                        line: b.line,
                        message: b.message.clone(),
                    });
                }
            }
            loaded.skipped.extend(bad);
            for r in records {
                if let Some(rel) = &r.transcript {
                    loaded.transcript_paths.insert(r.run_id.clone(), root.join(rel));
                }
                if r.is_completed() {
                    if let Some(m) = verify_record(&root, &loaded.scenarios[&r.scenario], &r) {
                        loaded.mismatches.push(m);
                    }
                }
                loaded.records.push(r);
            }
        }
    }
    Ok(loaded)
}

/// Recompute a completed record's metrics from its transcript.
pub fn verify_record(root: &Path, scenario: &Scenario, r: &RunRecord) -> Option<Mismatch> {
    let mismatch = |message: String| {
        Some(Mismatch {
            run_id: r.run_id.clone(),
            message,
        })
    };
    let Some(rel) = &r.transcript else {
        return mismatch("completed run without transcript".into());
    };
    let t = match read_transcript(&root.join(rel)) {
        Ok(t) => t,
        Err(e) => return mismatch(e.to_string()),
    };
    match NegotiationMetrics::from_transcript(scenario, &t) {
        Ok(m) if Some(&m) == r.metrics.as_ref() => None,
        Ok(m) => mismatch(format!("stored metrics {:?} differ from transcript {:?}", r.metrics, m)),
        Err(e) => mismatch(e.to_string()),
    }
}
