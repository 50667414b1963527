//! Simulation engine and experiment harness for timed bilateral multi-issue
//! negotiation between language-model or scripted agents.
//!
//! - [`scenario`]: issues, payoff tables, utilities.
//! - [`temporal`]: clocks, speech latency, treatment prompts and prefixes.
//! - [`action`] and [`engine`]: the turn protocol and its state machine.
//! - [`agents`]: remote chat-completions agents and scripted test doubles.
//! - [`runner`]: grid expansion, resumable execution, run records.
//! - [`stats`]: closure rates, t-tests, offer-level logistic regression.

pub mod action;
pub mod agents;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod runner;
pub mod scenario;
pub mod stats;
pub mod temporal;
pub mod transcript;

pub use action::{parse_action, ActionMessage};
pub use engine::{run_negotiation, NegotiationState, Outcome, OutcomeKind, RunOptions, TranscriptEvent};
pub use error::{ActionError, AgentError, EngineError, RunnerError, ScenarioError, StatsError};
pub use scenario::{load_scenario, Bundle, Points, Scenario};
pub use temporal::{ClockMode, ClockState, Millis, Treatment, TreatmentConfig};
pub use transcript::Transcript;
