use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Agent, AgentReply, TurnContext, TurnView, UsageStats};
use crate::action::ActionMessage;
use crate::error::AgentError;
use crate::scenario::{Bundle, Points, Scenario};

/// Deterministic test-double policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ScriptedPolicy {
    /// Accept any complete standing offer worth at least `threshold`; otherwise talk.
    ThresholdAccepter {
        threshold: Points,
        #[serde(default = "default_words")]
        words: usize,
    },
    /// Emit the k-th raw output on the k-th own turn; repeat the last one after that.
    FixedScript { actions: Vec<String> },
    /// Start from `start` (default: own best bundle) and, each own turn, move the
    /// next issue in `order` to the opponent's best option. Accepts any complete
    /// standing offer worth at least `threshold`.
    ConcessionLadder {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start: Option<Bundle>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        order: Vec<String>,
        threshold: Points,
        #[serde(default = "default_words")]
        words: usize,
    },
    /// Propose its own best bundle forever.
    NeverAgree {
        #[serde(default = "default_words")]
        words: usize,
    },
    /// Take the outside option on its first turn.
    InstantBatna {
        #[serde(default = "default_words")]
        words: usize,
    },
    /// Accept a complete standing offer with probability
    /// `1 / (1 + exp(-(u - t) / scale))`, where the working threshold `t` falls
    /// from `threshold` toward `floor` as the time cue in the latest incoming
    /// message says the deadline nears. Without a cue it stays at `threshold`;
    /// an urgency cue drops it to `floor`. Seeded per run and turn.
    AdaptiveAccepter {
        threshold: Points,
        floor: Points,
        scale: f64,
        #[serde(default = "default_words")]
        words: usize,
    },
}

fn default_words() -> usize {
    12
}

impl ScriptedPolicy {
    pub fn validate(&self) -> Result<(), AgentError> {
        match self {
            ScriptedPolicy::FixedScript { actions } if actions.is_empty() => {
                Err(AgentError::InvalidSpec("fixed_script needs at least one action".into()))
            }
            ScriptedPolicy::AdaptiveAccepter { scale, .. } if !(*scale > 0.0) => {
                Err(AgentError::InvalidSpec("adaptive_accepter scale must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

const VOCAB: [&str; 12] = [
    "let", "us", "find", "terms", "that", "work", "well", "for", "both", "of", "our", "sides",
];

/// A deterministic message of exactly `words` words.
pub fn filler_message(words: usize) -> String {
    (0..words).map(|i| VOCAB[i % VOCAB.len()]).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    policy: ScriptedPolicy,
}

impl ScriptedAgent {
    pub fn new(policy: ScriptedPolicy) -> Self {
        ScriptedAgent { policy }
    }

    /// The action this policy takes, as a pure function of its inputs.
    pub fn decide(&self, ctx: &TurnContext, view: &TurnView<'_>) -> Result<String, AgentError> {
        let scenario = view.scenario;
        let own_offer_value = || {
            let offer = &view.opponent_offer().terms;
            scenario
                .is_complete(offer)
                .then(|| scenario.utility(view.role, offer).ok())
                .flatten()
        };
        let action = match &self.policy {
            ScriptedPolicy::ThresholdAccepter { threshold, words } => match own_offer_value() {
                Some(u) if u >= *threshold => ActionMessage::accept(filler_message(*words)),
                _ => ActionMessage::talk(filler_message(*words)),
            },
            ScriptedPolicy::FixedScript { actions } => {
                let k = view.own_turns().min(actions.len() - 1);
                return Ok(actions[k].clone());
            }
            ScriptedPolicy::ConcessionLadder {
                start,
                order,
                threshold,
                words,
            } => match own_offer_value() {
                Some(u) if u >= *threshold => ActionMessage::accept(filler_message(*words)),
                _ => ActionMessage::propose(
                    filler_message(*words),
                    ladder_bundle(scenario, view.role, start.as_ref(), order, view.own_turns()),
                ),
            },
            ScriptedPolicy::NeverAgree { words } => {
                ActionMessage::propose(filler_message(*words), scenario.best_bundle(view.role))
            }
            ScriptedPolicy::InstantBatna { words } => ActionMessage::batna(filler_message(*words)),
            ScriptedPolicy::AdaptiveAccepter {
                threshold,
                floor,
                scale,
                words,
            } => {
                let working = working_threshold(ctx, *threshold, *floor);
                match own_offer_value() {
                    Some(u) => {
                        let p = 1.0 / (1.0 + (-(u as f64 - working) / scale).exp());
                        let mut rng = turn_rng(view.seed, view.role, view.events.len());
                        if rng.gen::<f64>() < p {
                            ActionMessage::accept(filler_message(*words))
                        } else {
                            ActionMessage::talk(filler_message(*words))
                        }
                    }
                    None => ActionMessage::talk(filler_message(*words)),
                }
            }
        };
        Ok(action.to_json())
    }
}

impl Agent for ScriptedAgent {
    fn next_action(&mut self, ctx: &TurnContext, view: &TurnView<'_>) -> Result<AgentReply, AgentError> {
        Ok(AgentReply {
            raw: self.decide(ctx, view)?,
            usage: UsageStats::default(),
        })
    }
}

/// Start bundle with the first `step` issues of `order` moved to the opponent's
/// best option.
pub(crate) fn ladder_bundle(
    scenario: &Scenario,
    role: &str,
    start: Option<&Bundle>,
    order: &[String],
    step: usize,
) -> Bundle {
    let opponent = scenario.opponent(role);
    let mut bundle = start.cloned().unwrap_or_else(|| scenario.best_bundle(role));
    let default_order: Vec<String>;
    let order = if order.is_empty() {
        default_order = scenario.issues.iter().map(|i| i.id.clone()).collect();
        &default_order
    } else {
        order
    };
    let their_best = scenario.best_bundle(opponent);
    for issue in order.iter().take(step) {
        if let Some(label) = their_best.get(issue) {
            bundle.set(issue.clone(), label);
        }
    }
    bundle
}

fn working_threshold(ctx: &TurnContext, threshold: Points, floor: Points) -> f64 {
    let (hi, lo) = (threshold as f64, floor as f64);
    let Some(incoming) = ctx.last_incoming() else {
        return hi;
    };
    if incoming.starts_with(crate::temporal::URGENCY_PREFIX) {
        return lo;
    }
    let left = incoming
        .strip_prefix('(')
        .and_then(|s| s.split_once(" seconds left)\n"))
        .and_then(|(n, _)| n.parse::<f64>().ok());
    let total = stated_budget(ctx.system_prompt());
    match (left, total) {
        (Some(left), Some(total)) if total > 0.0 => lo + (hi - lo) * (left / total).clamp(0.0, 1.0),
        _ => hi,
    }
}

fn stated_budget(prompt: &str) -> Option<f64> {
    let (_, rest) = prompt.split_once("You have exactly ")?;
    let (n, _) = rest.split_once(" seconds")?;
    n.trim().parse().ok()
}

fn turn_rng(seed: u64, role: &str, turn: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(role.as_bytes());
    h.update((turn as u64).to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
