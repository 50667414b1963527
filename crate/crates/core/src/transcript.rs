//! Transcript JSONL: a header line, one line per event, one outcome line.
//!
//! Every line carries `schema_version` and a `type` tag. Bundles hold canonical
//! option labels, so a transcript can be re-scored without the raw outputs.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::engine::{Outcome, TranscriptEvent};
use crate::temporal::TreatmentConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub schema_version: u32,
    pub run_id: String,
    pub cell_key: String,
    pub scenario: String,
    pub treatment: TreatmentConfig,
    pub initiator: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub events: Vec<TranscriptEvent>,
    pub outcome: Outcome,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(TranscriptHeader),
    Event(VersionedEvent),
    Outcome(VersionedOutcome),
}

#[derive(Debug, Serialize, Deserialize)]
struct VersionedEvent {
    schema_version: u32,
    #[serde(flatten)]
    event: TranscriptEvent,
}

#[derive(Debug, Serialize, Deserialize)]
struct VersionedOutcome {
    schema_version: u32,
    #[serde(flatten)]
    outcome: Outcome,
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema version {found}, expected {SCHEMA_VERSION}")]
    Version { line: usize, found: u32 },
    #[error("transcript is missing its {0} line")]
    Missing(&'static str),
    #[error("line {line}: events out of order (turn {turn} after {prev})")]
    Order { line: usize, turn: u32, prev: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &Line| {
            out.push_str(&serde_json::to_string(line).expect("transcript line serializes"));
            out.push('\n');
        };
        push(&Line::Header(self.header.clone()));
        for e in &self.events {
            push(&Line::Event(VersionedEvent {
                schema_version: SCHEMA_VERSION,
                event: e.clone(),
            }));
        }
        push(&Line::Outcome(VersionedOutcome {
            schema_version: SCHEMA_VERSION,
            outcome: self.outcome.clone(),
        }));
        out
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        Self::read_jsonl(text.as_bytes())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, TranscriptError> {
        let mut header = None;
        let mut events: Vec<TranscriptEvent> = Vec::new();
        let mut outcome = None;
        for (i, line) in r.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| TranscriptError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let version = match &parsed {
                Line::Header(h) => h.schema_version,
                Line::Event(e) => e.schema_version,
                Line::Outcome(o) => o.schema_version,
            };
            if version != SCHEMA_VERSION {
                return Err(TranscriptError::Version { line: lineno, found: version });
            }
            let misplaced = |what: &str| TranscriptError::Parse {
                line: lineno,
                message: format!("unexpected {what} line"),
            };
            match parsed {
                Line::Header(h) if header.is_none() && events.is_empty() => header = Some(h),
                Line::Header(_) => return Err(misplaced("header")),
                Line::Event(_) if header.is_none() || outcome.is_some() => {
                    return Err(misplaced("event"))
                }
                Line::Event(v) => {
                    if let Some(prev) = events.last() {
                        if v.event.turn <= prev.turn {
                            return Err(TranscriptError::Order {
                                line: lineno,
                                turn: v.event.turn,
                                prev: prev.turn,
                            });
                        }
                    }
                    events.push(v.event);
                }
                Line::Outcome(_) if header.is_none() || outcome.is_some() => {
                    return Err(misplaced("outcome"))
                }
                Line::Outcome(v) => outcome = Some(v.outcome),
            }
        }
        Ok(Transcript {
            header: header.ok_or(TranscriptError::Missing("header"))?,
            events,
            outcome: outcome.ok_or(TranscriptError::Missing("outcome"))?,
        })
    }
}
