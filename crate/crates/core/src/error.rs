use thiserror::Error;

use crate::scenario::Points;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("scenario schema error: {0}")]
    Schema(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: declared maximum {declared} but payoff table sums to {computed}")]
    DeclaredMaxMismatch {
        path: String,
        declared: Points,
        computed: Points,
    },
    #[error("bundle does not assign issue `{0}`")]
    IncompleteBundle(String),
    #[error("unknown issue `{0}`")]
    UnknownIssue(String),
    #[error("issue `{issue}` has no option `{label}`")]
    UnknownLabel { issue: String, label: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Why an agent's raw output could not be turned into an action. Every variant
/// carries the raw text for logging.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error("no JSON object found in agent output")]
    NoJsonFound { raw: String },
    #[error("field `{field}` has the wrong type: {message}")]
    FieldTypeError {
        field: String,
        message: String,
        raw: String,
    },
    #[error("`accepted` and `taking_batna` are both true")]
    BothFlagsTrue { raw: String },
    #[error("proposal names unknown issue `{key}`")]
    UnknownIssueKey { key: String, raw: String },
}

impl ActionError {
    pub fn raw(&self) -> &str {
        match self {
            ActionError::NoJsonFound { raw }
            | ActionError::FieldTypeError { raw, .. }
            | ActionError::BothFlagsTrue { raw }
            | ActionError::UnknownIssueKey { raw, .. } => raw,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("negotiation has already ended")]
    AlreadyEnded,
    #[error("`{0}` accepted but the opponent has not proposed anything")]
    AcceptWithoutStandingOffer(String),
    #[error("no agent configured for role `{0}`")]
    MissingAgent(String),
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error(transparent)]
    Treatment(#[from] TreatmentError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreatmentError {
    #[error("timed treatments need a positive time budget")]
    MissingBudget,
    #[error("turn-limited treatments take no time budget")]
    BudgetWithTurnLimit,
    #[error("turn limit must be a positive integer")]
    ZeroTurnLimit,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("rate limited (HTTP 429)")]
    RateLimited,
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("missing API key: environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("invalid agent spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    CorruptLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: schema version {found}, expected {expected}")]
    SchemaVersion {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl RunnerError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        RunnerError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no observations")]
    Empty,
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("k = {k} is outside 0..={n}")]
    BadCount { k: u64, n: u64 },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("outcomes are perfectly separated; the likelihood has no finite maximum")]
    PerfectSeparation,
    #[error("IRLS did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("cluster-robust covariance needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}
