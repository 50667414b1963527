//! Agents and the per-turn conversational context they receive.
//!
//! Two families implement [`Agent`]: [`RemoteAgent`] talks to an
//! OpenAI-style chat-completions endpoint, and [`ScriptedAgent`] evaluates a
//! deterministic policy for tests and demos.

mod remote;
mod scripted;
pub mod stub;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{StandingOffer, TranscriptEvent};
use crate::error::AgentError;
use crate::scenario::Scenario;
use crate::temporal::{ClockState, Millis, TreatmentConfig};

pub use remote::{RateLimiter, RemoteAgent, RemoteSpec, RetryPolicy};
pub use scripted::{filler_message, ScriptedAgent, ScriptedPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

/// Everything an agent sees when asked for its next action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnContext {
    /// System prompt, then the full dialogue history from this agent's side.
    pub messages: Vec<ChatMessage>,
    /// Corrective note after a malformed reply; sent as a trailing system message.
    pub format_instruction: Option<String>,
}

impl TurnContext {
    /// Messages as sent over the wire.
    pub fn wire_messages(&self) -> Vec<ChatMessage> {
        let mut out = self.messages.clone();
        if let Some(note) = &self.format_instruction {
            out.push(ChatMessage::new(ChatRole::System, note.clone()));
        }
        out
    }

    pub fn system_prompt(&self) -> &str {
        self.messages
            .first()
            .filter(|m| m.role == ChatRole::System)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// Content of the most recent opponent message, prefix included.
    pub fn last_incoming(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
    }
}

/// What the opponent receives for one delivered utterance: message and proposal.
pub fn render_incoming(event: &TranscriptEvent) -> String {
    #[derive(Serialize)]
    struct Incoming<'a> {
        message: &'a str,
        proposal: &'a Option<crate::scenario::Bundle>,
    }
    serde_json::to_string(&Incoming {
        message: &event.action.message,
        proposal: &event.action.proposal,
    })
    .expect("incoming message serializes")
}

/// Assemble the untruncated history for `role`.
///
/// The agent's own turns appear as its raw outputs; opponent turns appear as
/// rendered message-plus-proposal, with `prefix` prepended to the latest one.
pub fn build_turn_context(
    system_prompt: &str,
    events: &[TranscriptEvent],
    role: &str,
    prefix: &str,
) -> TurnContext {
    let mut messages = Vec::with_capacity(events.len() + 1);
    messages.push(ChatMessage::new(ChatRole::System, system_prompt));
    let last_opponent = events.iter().rposition(|e| e.role != role);
    for (i, e) in events.iter().enumerate() {
        if e.role == role {
            messages.push(ChatMessage::new(ChatRole::Assistant, e.raw.clone()));
        } else {
            let body = render_incoming(e);
            let content = if Some(i) == last_opponent {
                format!("{prefix}{body}")
            } else {
                body
            };
            messages.push(ChatMessage::new(ChatRole::User, content));
        }
    }
    TurnContext {
        messages,
        format_instruction: None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageStats {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    /// `None` when the provider does not report reasoning tokens.
    pub reasoning_tokens: Option<u64>,
    pub generation_ms: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentReply {
    pub raw: String,
    pub usage: UsageStats,
}

/// Read-only view of the negotiation for scripted policies.
pub struct TurnView<'a> {
    pub scenario: &'a Scenario,
    pub role: &'a str,
    pub events: &'a [TranscriptEvent],
    pub standing: &'a BTreeMap<String, StandingOffer>,
    pub clock: &'a ClockState,
    pub treatment: &'a TreatmentConfig,
    pub seed: u64,
    /// 0 for the first request of a turn, then one per re-request.
    pub attempt: u32,
}

impl TurnView<'_> {
    pub fn opponent_offer(&self) -> &StandingOffer {
        &self.standing[self.scenario.opponent(self.role)]
    }

    /// How many turns this role has already taken.
    pub fn own_turns(&self) -> usize {
        self.events.iter().filter(|e| e.role == self.role).count()
    }
}

pub trait Agent: Send {
    fn next_action(&mut self, ctx: &TurnContext, view: &TurnView<'_>) -> Result<AgentReply, AgentError>;
}

/// How to build one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentSpec {
    Scripted(ScriptedPolicy),
    Remote(RemoteSpec),
}

impl AgentSpec {
    pub fn validate(&self) -> Result<(), AgentError> {
        match self {
            AgentSpec::Scripted(p) => p.validate(),
            AgentSpec::Remote(r) => r.validate(),
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, AgentSpec::Remote(_))
    }

    /// Instantiate a fresh agent for one negotiation.
    pub fn build(&self, limiter: Option<Arc<RateLimiter>>) -> Result<Box<dyn Agent>, AgentError> {
        self.validate()?;
        Ok(match self {
            AgentSpec::Scripted(p) => Box::new(ScriptedAgent::new(p.clone())),
            AgentSpec::Remote(r) => Box::new(RemoteAgent::new(r.clone(), limiter)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionMessage;
    use crate::scenario::Bundle;

    fn event(turn: u32, role: &str, msg: &str) -> TranscriptEvent {
        let action = ActionMessage::propose(msg, [("salary", "$39 000")].into_iter().collect::<Bundle>());
        TranscriptEvent {
            turn,
            role: role.into(),
            raw: format!("raw-{turn}"),
            words: 1,
            action,
            prefix: String::new(),
            latency_ms: Millis(400),
            remaining_ms: None,
            reasoning_tokens: None,
            generation_ms: None,
            retries: 0,
            timestamp_ms: Millis(0),
        }
    }

    #[test]
    fn empty_history_is_system_only() {
        let ctx = build_turn_context("SYS", &[], "hr", "");
        assert_eq!(ctx.messages, vec![ChatMessage::new(ChatRole::System, "SYS")]);
        assert_eq!(ctx.last_incoming(), None);
    }

    #[test]
    fn prefix_only_on_latest_opponent_message() {
        let events = vec![event(0, "candidate", "a"), event(1, "hr", "b"), event(2, "candidate", "c")];
        let ctx = build_turn_context("SYS", &events, "hr", "(137 seconds left)\n");
        assert_eq!(ctx.messages.len(), 4);
        assert_eq!(ctx.messages[1].role, ChatRole::User);
        assert!(ctx.messages[1].content.starts_with("{\"message\":\"a\""));
        assert_eq!(ctx.messages[2], ChatMessage::new(ChatRole::Assistant, "raw-1"));
        assert!(ctx.messages[3].content.starts_with("(137 seconds left)\n{\"message\":\"c\""));
        assert_eq!(
            ctx.messages[3].content,
            "(137 seconds left)\n{\"message\":\"c\",\"proposal\":{\"salary\":\"$39 000\"}}"
        );
        let again = build_turn_context("SYS", &events, "hr", "(137 seconds left)\n");
        assert_eq!(ctx, again);
    }

    #[test]
    fn format_instruction_is_trailing_system_message() {
        let mut ctx = build_turn_context("SYS", &[], "hr", "");
        ctx.format_instruction = Some("fix it".into());
        let wire = ctx.wire_messages();
        assert_eq!(wire.len(), 2);
        assert_eq!(wire[1], ChatMessage::new(ChatRole::System, "fix it"));
    }

    #[test]
    fn spec_serde() {
        let spec: AgentSpec =
            serde_json::from_str(r#"{"kind":"scripted","policy":"threshold_accepter","threshold":8000}"#).unwrap();
        assert!(matches!(spec, AgentSpec::Scripted(ScriptedPolicy::ThresholdAccepter { threshold: 8000, .. })));
        let remote: AgentSpec = serde_json::from_str(
            r#"{"kind":"remote","base_url":"http://x","model":"m","api_key_env":"K"}"#,
        )
        .unwrap();
        assert!(remote.is_remote());
        let bad: AgentSpec = serde_json::from_str(
            r#"{"kind":"remote","base_url":"http://x","model":"","api_key_env":"K"}"#,
        )
        .unwrap();
        assert!(bad.validate().is_err());
    }
}
