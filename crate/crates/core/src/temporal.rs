//! Clock and treatment mechanics: time budgets, the speech-latency rule,
//! per-turn prefixes and system-prompt augmentation.
//!
//! Time is kept in integer milliseconds. At 150 words per minute one word costs
//! exactly 400 ms, so latency arithmetic never rounds.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::TreatmentError;

/// Speaking rate of the simulated text-to-speech channel.
pub const WORDS_PER_MINUTE: u64 = 150;
/// 60 000 ms / 150 words.
pub const MILLIS_PER_WORD: u64 = 60_000 / WORDS_PER_MINUTE;

pub const URGENCY_PREFIX: &str = "(Deadline approaching--act with urgency.)\n";

/// Placeholder a role prompt may contain to position the deadline sentence.
pub const DEADLINE_PLACEHOLDER: &str = "{{deadline}}";
/// Placeholder a role prompt may contain to position the latency paragraph.
pub const LATENCY_PLACEHOLDER: &str = "{{latency}}";

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Millis(pub u64);

impl Millis {
    pub const ZERO: Millis = Millis(0);

    pub fn from_secs(secs: u64) -> Self {
        Millis(secs * 1000)
    }

    /// Whole seconds, rounded down.
    pub fn floor_secs(self) -> u64 {
        self.0 / 1000
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn saturating_sub(self, other: Millis) -> Millis {
        Millis(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for Millis {
    type Output = Millis;
    fn add(self, rhs: Millis) -> Millis {
        Millis(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Millis {
    fn add_assign(&mut self, rhs: Millis) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for Millis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}s", self.0 / 1000, self.0 % 1000)
    }
}

/// Number of whitespace-delimited tokens in a message.
pub fn word_count(message: &str) -> usize {
    message.split_whitespace().count()
}

/// Simulated delivery time of a message: 0.4 s per word.
pub fn speech_latency(message: &str) -> Millis {
    Millis(word_count(message) as u64 * MILLIS_PER_WORD)
}

/// Which costs are deducted from the remaining budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Only the speech latency of each delivered message.
    #[default]
    SimulatedSpeech,
    /// Only measured wall time spent producing each message.
    WallClock,
    /// Both.
    Hybrid,
}

impl ClockMode {
    pub fn uses_wall_time(self) -> bool {
        matches!(self, ClockMode::WallClock | ClockMode::Hybrid)
    }

    pub fn uses_speech(self) -> bool {
        matches!(self, ClockMode::SimulatedSpeech | ClockMode::Hybrid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Treatment {
    /// Budget stated once in the system prompt.
    Control,
    /// Budget stated once, plus a remaining-seconds prefix every turn.
    TimeAware,
    /// Budget stated once, plus a qualitative reminder every turn.
    Urgency,
    /// A budget of collective utterances instead of time.
    TurnLimited { turns: u32 },
    /// No timing text at all.
    Baseline,
}

impl Treatment {
    /// Short stable name used in cell keys and reports.
    pub fn slug(&self) -> String {
        match self {
            Treatment::Control => "control".into(),
            Treatment::TimeAware => "time_aware".into(),
            Treatment::Urgency => "urgency".into(),
            Treatment::TurnLimited { .. } => "turn_limited".into(),
            Treatment::Baseline => "baseline".into(),
        }
    }

    pub fn is_timed(&self) -> bool {
        matches!(self, Treatment::Control | Treatment::TimeAware | Treatment::Urgency)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreatmentConfig {
    pub treatment: Treatment,
    /// Total time budget in seconds. Required for timed treatments, optional for
    /// Baseline, forbidden for TurnLimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_secs: Option<u64>,
    #[serde(default = "default_true")]
    pub latency_enabled: bool,
    #[serde(default)]
    pub clock_mode: ClockMode,
}

fn default_true() -> bool {
    true
}

impl TreatmentConfig {
    pub fn timed(treatment: Treatment, budget_secs: u64) -> Self {
        TreatmentConfig {
            treatment,
            budget_secs: Some(budget_secs),
            latency_enabled: true,
            clock_mode: ClockMode::SimulatedSpeech,
        }
    }

    pub fn turn_limited(turns: u32) -> Self {
        TreatmentConfig {
            treatment: Treatment::TurnLimited { turns },
            budget_secs: None,
            latency_enabled: true,
            clock_mode: ClockMode::SimulatedSpeech,
        }
    }

    pub fn validate(&self) -> Result<(), TreatmentError> {
        match self.treatment {
            Treatment::TurnLimited { turns } => {
                if turns == 0 {
                    return Err(TreatmentError::ZeroTurnLimit);
                }
                if self.budget_secs.is_some() {
                    return Err(TreatmentError::BudgetWithTurnLimit);
                }
            }
            t if t.is_timed() => {
                if !matches!(self.budget_secs, Some(b) if b > 0) {
                    return Err(TreatmentError::MissingBudget);
                }
            }
            _ => {
                if self.budget_secs == Some(0) {
                    return Err(TreatmentError::MissingBudget);
                }
            }
        }
        Ok(())
    }

    pub fn turn_budget(&self) -> Option<u32> {
        match self.treatment {
            Treatment::TurnLimited { turns } => Some(turns),
            _ => None,
        }
    }

    pub fn new_clock(&self) -> ClockState {
        ClockState::new(self.budget_secs.map(Millis::from_secs), self.clock_mode)
    }

    /// Budget-and-treatment label, e.g. `control-240`, `turn_limited-5`.
    pub fn label(&self) -> String {
        let mut s = self.treatment.slug();
        match (self.treatment, self.budget_secs) {
            (Treatment::TurnLimited { turns }, _) => s.push_str(&format!("-{turns}")),
            (_, Some(b)) => s.push_str(&format!("-{b}")),
            _ => {}
        }
        if !self.latency_enabled {
            s.push_str("-nolatency");
        }
        match self.clock_mode {
            ClockMode::SimulatedSpeech => {}
            ClockMode::WallClock => s.push_str("-wall"),
            ClockMode::Hybrid => s.push_str("-hybrid"),
        }
        s
    }
}

/// Remaining-time bookkeeping for one negotiation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockState {
    /// `None` for untimed runs.
    pub total: Option<Millis>,
    pub remaining: Option<Millis>,
    /// Total cost charged so far, timed or not.
    pub elapsed: Millis,
    pub mode: ClockMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Charge {
    Charged,
    InsufficientTime,
}

impl ClockState {
    pub fn new(total: Option<Millis>, mode: ClockMode) -> Self {
        ClockState {
            total,
            remaining: total,
            elapsed: Millis::ZERO,
            mode,
        }
    }

    /// Deduct `cost`. A cost larger than the remaining time leaves the clock
    /// untouched and reports `InsufficientTime`.
    pub fn charge(&mut self, cost: Millis) -> Charge {
        match self.remaining {
            Some(rem) if cost > rem => Charge::InsufficientTime,
            Some(rem) => {
                self.remaining = Some(rem.saturating_sub(cost));
                self.elapsed += cost;
                Charge::Charged
            }
            None => {
                self.elapsed += cost;
                Charge::Charged
            }
        }
    }

    /// The deadline is strict: zero remaining time counts as expired.
    pub fn is_expired(&self) -> bool {
        self.remaining == Some(Millis::ZERO)
    }

    /// Cost of one utterance under this clock's mode.
    pub fn utterance_cost(&self, speech: Millis, generation: Millis, latency_enabled: bool) -> Millis {
        let mut cost = Millis::ZERO;
        if latency_enabled && self.mode.uses_speech() {
            cost += speech;
        }
        if self.mode.uses_wall_time() {
            cost += generation;
        }
        cost
    }
}

/// Per-turn prefix attached to the opponent's latest message.
pub fn render_time_prefix(
    cfg: &TreatmentConfig,
    clock: &ClockState,
    has_opponent_message: bool,
) -> String {
    if !has_opponent_message {
        return String::new();
    }
    match cfg.treatment {
        Treatment::TimeAware => {
            let secs = clock.remaining.map(Millis::floor_secs).unwrap_or(0);
            format!("({secs} seconds left)\n")
        }
        Treatment::Urgency => URGENCY_PREFIX.to_string(),
        _ => String::new(),
    }
}

/// One-time deadline sentence for timed treatments.
pub fn deadline_sentence(budget_secs: u64) -> String {
    format!(" You have exactly {budget_secs} seconds from your first message to reach a deal.")
}

/// Disclosure of the speech channel, addressed to the listening party.
pub fn latency_paragraph(addressee: &str) -> String {
    format!(
        "\n Your output message will be passed through a text to speech model to \
         communicate to the {addressee}. The text to speech model runs at 150 words \
         per minute, meaning that if you output 150 words, it will take 60 seconds to \
         communicate the message to the {addressee}."
    )
}

pub fn turn_budget_sentence(turns: u32) -> String {
    format!(
        " You have exactly {turns} collective utterances (messages from both parties \
         combined) to reach a deal."
    )
}

/// Build the final system prompt for one role under `cfg`.
///
/// Text goes where the prompt's `{{deadline}}` / `{{latency}}` placeholders are,
/// or is appended in that order when a placeholder is absent.
pub fn system_prompt_augmentation(cfg: &TreatmentConfig, base: &str, addressee: &str) -> String {
    let (deadline, latency) = match cfg.treatment {
        Treatment::Baseline => (String::new(), String::new()),
        Treatment::TurnLimited { turns } => {
            let latency = if cfg.latency_enabled {
                latency_paragraph(addressee)
            } else {
                String::new()
            };
            (turn_budget_sentence(turns), latency)
        }
        _ => {
            let deadline = cfg.budget_secs.map(deadline_sentence).unwrap_or_default();
            let latency = if cfg.latency_enabled {
                latency_paragraph(addressee)
            } else {
                String::new()
            };
            (deadline, latency)
        }
    };
    let mut prompt = base.to_string();
    for (placeholder, text) in [(DEADLINE_PLACEHOLDER, deadline), (LATENCY_PLACEHOLDER, latency)] {
        if prompt.contains(placeholder) {
            prompt = prompt.replace(placeholder, &text);
        } else {
            prompt.push_str(&text);
        }
    }
    prompt
}

/// Monotonic time source used by wall-clock modes.
pub trait TimeSource: Send + Sync {
    fn now(&self) -> Millis;
}

/// Real elapsed time since construction.
#[derive(Debug)]
pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl TimeSource for MonotonicClock {
    fn now(&self) -> Millis {
        Millis(self.0.elapsed().as_millis() as u64)
    }
}

/// A clock that only moves when told to. Clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Millis) {
        self.0.fetch_add(by.0, Ordering::SeqCst);
    }
}

impl TimeSource for ManualClock {
    fn now(&self) -> Millis {
        Millis(self.0.load(Ordering::SeqCst))
    }
}
