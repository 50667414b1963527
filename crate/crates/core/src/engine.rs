//! The alternating-turn negotiation state machine.
//!
//! [`NegotiationState`] owns one negotiation: whose turn it is, the clock, the
//! standing offers and the append-only event log. [`run_negotiation`] drives it
//! with two [`Agent`]s until a termination rule fires.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::action::{parse_action, ActionMessage};
use crate::agents::{build_turn_context, Agent, TurnView, UsageStats};
use crate::error::{ActionError, AgentError, EngineError};
use crate::scenario::{Bundle, Points, Scenario};
use crate::temporal::{
    render_time_prefix, speech_latency, system_prompt_augmentation, word_count, Charge,
    ClockState, Millis, TimeSource, TreatmentConfig,
};
use crate::transcript::{Transcript, TranscriptHeader, SCHEMA_VERSION};

/// Latest merged proposal attributed to one party.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandingOffer {
    pub terms: Bundle,
    /// Turn index that last set each issue.
    pub provenance: BTreeMap<String, u32>,
}

impl StandingOffer {
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Field-wise last-writer-wins overlay of `incoming` onto `standing`.
pub fn merge_proposal(standing: &StandingOffer, incoming: &Bundle, turn: u32) -> StandingOffer {
    let mut merged = standing.clone();
    for (issue, label) in incoming.iter() {
        merged.terms.set(issue, label);
        merged.provenance.insert(issue.to_string(), turn);
    }
    merged
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Deal,
    Batna,
    Timeout,
    TurnExhausted,
}

/// A message that arrived after the deadline and was dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardedUtterance {
    pub role: String,
    pub raw: String,
    pub action: ActionMessage,
    pub cost_ms: Millis,
    pub remaining_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub kind: OutcomeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batna_role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreed: Option<Bundle>,
    /// The accepted offer did not cover every issue.
    #[serde(default)]
    pub incomplete: bool,
    /// Deal: utilities of the agreed terms. Otherwise each role's BATNA.
    pub payoffs: BTreeMap<String, Points>,
    pub utterances: u32,
    pub words_total: u64,
    pub elapsed_ms: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discarded: Option<DiscardedUtterance>,
    /// Agent failure that ended the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Set when time and turn budgets ran out together.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub simultaneous_exhaustion: bool,
}

impl Outcome {
    /// A complete deal, the only kind that counts toward closure.
    pub fn is_closed_deal(&self) -> bool {
        self.kind == OutcomeKind::Deal && !self.incomplete
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub turn: u32,
    pub role: String,
    /// Model output exactly as received.
    pub raw: String,
    pub action: ActionMessage,
    /// Prefix attached to the opponent's message when this turn was requested.
    pub prefix: String,
    pub words: u32,
    pub latency_ms: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remaining_ms: Option<Millis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_ms: Option<Millis>,
    /// Malformed outputs re-requested before this one was accepted.
    #[serde(default)]
    pub retries: u32,
    /// Simulated time at which the message finished delivering.
    pub timestamp_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Termination {
    Continue,
    Ended(Outcome),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Running,
    Ended(Outcome),
}

/// One delivered turn, ready to be applied.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub raw: String,
    pub action: ActionMessage,
    pub prefix: String,
    pub charged: Millis,
    pub usage: UsageStats,
    pub retries: u32,
}

impl Utterance {
    pub fn scripted(action: ActionMessage, charged: Millis) -> Self {
        Utterance {
            raw: action.to_json(),
            action,
            prefix: String::new(),
            charged,
            usage: UsageStats::default(),
            retries: 0,
        }
    }
}

/// Hard cap on utterances for runs with no binding budget.
pub const DEFAULT_MAX_UTTERANCES: u32 = 100;

#[derive(Debug, Clone)]
pub struct NegotiationState {
    pub scenario: Arc<Scenario>,
    pub treatment: TreatmentConfig,
    pub clock: ClockState,
    pub turn_index: u32,
    pub active_role: String,
    pub events: Vec<TranscriptEvent>,
    pub standing: BTreeMap<String, StandingOffer>,
    pub turn_budget: Option<u32>,
    pub max_utterances: u32,
    pub status: Status,
}

impl NegotiationState {
    pub fn new(
        scenario: Arc<Scenario>,
        treatment: TreatmentConfig,
        initiator: &str,
    ) -> Result<Self, EngineError> {
        treatment.validate()?;
        if !scenario.has_role(initiator) {
            return Err(EngineError::UnknownRole(initiator.into()));
        }
        let standing = scenario
            .roles
            .iter()
            .map(|r| (r.clone(), StandingOffer::default()))
            .collect();
        Ok(NegotiationState {
            clock: treatment.new_clock(),
            turn_budget: treatment.turn_budget(),
            treatment,
            turn_index: 0,
            active_role: initiator.to_string(),
            events: Vec::new(),
            standing,
            max_utterances: DEFAULT_MAX_UTTERANCES,
            status: Status::Running,
            scenario,
        })
    }

    pub fn is_running(&self) -> bool {
        self.status == Status::Running
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        match &self.status {
            Status::Ended(o) => Some(o),
            Status::Running => None,
        }
    }

    pub fn opponent_of(&self, role: &str) -> &str {
        self.scenario.opponent(role)
    }

    fn words_total(&self) -> u64 {
        self.events.iter().map(|e| e.words as u64).sum()
    }

    fn no_deal(&self, kind: OutcomeKind) -> Outcome {
        Outcome {
            kind,
            batna_role: None,
            agreed: None,
            incomplete: false,
            payoffs: self.scenario.batna_points.clone(),
            utterances: self.turn_index,
            words_total: self.words_total(),
            elapsed_ms: self.clock.elapsed,
            discarded: None,
            error: None,
            simultaneous_exhaustion: false,
        }
    }

    /// Record one delivered turn by the active role.
    ///
    /// Accepting binds to the opponent's standing offer; any proposal attached
    /// to an accepting or BATNA action is ignored.
    pub fn apply_action(&mut self, utt: Utterance) -> Result<(), EngineError> {
        if !self.is_running() {
            return Err(EngineError::AlreadyEnded);
        }
        let speaker = self.active_role.clone();
        let opponent = self.opponent_of(&speaker).to_string();
        if utt.action.accepted && self.standing[&opponent].is_empty() {
            return Err(EngineError::AcceptWithoutStandingOffer(speaker));
        }

        let turn = self.turn_index;
        self.events.push(TranscriptEvent {
            turn,
            role: speaker.clone(),
            words: word_count(&utt.action.message) as u32,
            raw: utt.raw,
            prefix: utt.prefix,
            latency_ms: utt.charged,
            remaining_ms: self.clock.remaining,
            reasoning_tokens: utt.usage.reasoning_tokens,
            generation_ms: utt.usage.generation_ms,
            retries: utt.retries,
            timestamp_ms: self.clock.elapsed,
            action: utt.action,
        });
        self.turn_index += 1;
        let action = &self.events.last().expect("just pushed").action;

        if action.accepted {
            let terms = self.standing[&opponent].terms.clone();
            let complete = self.scenario.is_complete(&terms);
            let mut payoffs = BTreeMap::new();
            for role in &self.scenario.roles {
                let p = if complete {
                    self.scenario.utility(role, &terms)?
                } else {
                    self.scenario.partial_utility(role, &terms)?
                };
                payoffs.insert(role.clone(), p);
            }
            let mut outcome = self.no_deal(OutcomeKind::Deal);
            outcome.agreed = Some(terms);
            outcome.incomplete = !complete;
            outcome.payoffs = payoffs;
            self.status = Status::Ended(outcome);
        } else if action.taking_batna {
            let mut outcome = self.no_deal(OutcomeKind::Batna);
            outcome.batna_role = Some(speaker);
            self.status = Status::Ended(outcome);
        } else {
            if let Some(p) = &action.proposal {
                let merged = merge_proposal(&self.standing[&speaker], p, turn);
                self.standing.insert(speaker, merged);
            }
            self.active_role = opponent;
        }
        Ok(())
    }

    /// Decide whether another turn may be requested.
    ///
    /// Timeout wins over turn exhaustion when both hold.
    pub fn check_termination(&self) -> Termination {
        if let Status::Ended(o) = &self.status {
            return Termination::Ended(o.clone());
        }
        let turns_out = self.turn_budget.is_some_and(|b| self.turn_index >= b);
        if self.clock.is_expired() {
            let mut o = self.no_deal(OutcomeKind::Timeout);
            o.simultaneous_exhaustion = turns_out;
            return Termination::Ended(o);
        }
        if turns_out || self.turn_index >= self.max_utterances {
            return Termination::Ended(self.no_deal(OutcomeKind::TurnExhausted));
        }
        Termination::Continue
    }

    /// Apply the result of [`check_termination`](Self::check_termination).
    pub fn settle(&mut self) -> Termination {
        let t = self.check_termination();
        if let Termination::Ended(o) = &t {
            self.status = Status::Ended(o.clone());
        }
        t
    }

    /// End the run because a message needed more time than was left.
    pub fn discard_over_budget(&mut self, role: &str, raw: String, action: ActionMessage, cost: Millis) {
        let mut o = self.no_deal(OutcomeKind::Timeout);
        o.discarded = Some(DiscardedUtterance {
            role: role.to_string(),
            raw,
            action,
            cost_ms: cost,
            remaining_ms: self.clock.remaining.unwrap_or_default(),
        });
        self.status = Status::Ended(o);
    }

    /// End the run because an agent could not produce a usable action.
    pub fn fail(&mut self, error: String) {
        let mut o = self.no_deal(OutcomeKind::Timeout);
        o.error = Some(error);
        self.status = Status::Ended(o);
    }
}

/// Standing offers after each event, replayed from the event log.
pub fn replay_standing(scenario: &Scenario, events: &[TranscriptEvent]) -> Vec<BTreeMap<String, StandingOffer>> {
    let mut standing: BTreeMap<String, StandingOffer> = scenario
        .roles
        .iter()
        .map(|r| (r.clone(), StandingOffer::default()))
        .collect();
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        if !e.action.is_terminal() {
            if let Some(p) = &e.action.proposal {
                let merged = merge_proposal(&standing[&e.role], p, e.turn);
                standing.insert(e.role.clone(), merged);
            }
        }
        out.push(standing.clone());
    }
    out
}

/// Knobs for [`run_negotiation`] that are not part of the treatment.
pub struct RunOptions<'a> {
    /// Re-requests allowed after malformed output.
    pub max_format_retries: u32,
    pub max_utterances: u32,
    /// Source of generation time for wall-clock modes. Unused otherwise.
    pub time_source: Option<&'a dyn TimeSource>,
    pub run_id: String,
    pub cell_key: String,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            max_format_retries: 2,
            max_utterances: DEFAULT_MAX_UTTERANCES,
            time_source: None,
            run_id: String::new(),
            cell_key: String::new(),
        }
    }
}

pub const CORRECTIVE_NOTE: &str = "Your previous reply could not be used";

fn corrective_note(problem: &str) -> String {
    format!(
        "{CORRECTIVE_NOTE} ({problem}). Reply again with exactly one JSON object of the form \
         {{\"message\": ..., \"proposal\": ..., \"accepted\": ..., \"taking_batna\": ...}}."
    )
}

/// Drive a full negotiation between `agents` (keyed by role).
pub fn run_negotiation(
    scenario: Arc<Scenario>,
    agents: &mut BTreeMap<String, Box<dyn Agent>>,
    treatment: &TreatmentConfig,
    initiator: &str,
    seed: u64,
    opts: &RunOptions<'_>,
) -> Result<Transcript, EngineError> {
    for role in &scenario.roles {
        if !agents.contains_key(role) {
            return Err(EngineError::MissingAgent(role.clone()));
        }
    }
    let mut state = NegotiationState::new(scenario.clone(), treatment.clone(), initiator)?;
    state.max_utterances = opts.max_utterances;

    let prompts: BTreeMap<String, String> = scenario
        .roles
        .iter()
        .map(|r| {
            let addressee = scenario
                .latency_addressee
                .get(r)
                .map(String::as_str)
                .unwrap_or_else(|| scenario.opponent(r));
            let p = system_prompt_augmentation(treatment, &scenario.system_prompts[r], addressee);
            (r.clone(), p)
        })
        .collect();

    let outcome = loop {
        if let Termination::Ended(o) = state.settle() {
            break o;
        }
        let role = state.active_role.clone();
        let prefix = render_time_prefix(treatment, &state.clock, !state.events.is_empty());
        let base_ctx = build_turn_context(&prompts[&role], &state.events, &role, &prefix);
        let agent = agents.get_mut(&role).expect("checked above");

        let mut retries = 0;
        let mut note: Option<String> = None;
        let attempt: Result<(String, ActionMessage, UsageStats), String> = loop {
            let mut ctx = base_ctx.clone();
            ctx.format_instruction = note.take();
            let view = TurnView {
                scenario: &scenario,
                role: &role,
                events: &state.events,
                standing: &state.standing,
                clock: &state.clock,
                treatment,
                seed,
                attempt: retries,
            };
            let started = opts.time_source.map(|t| t.now());
            let reply = agent.next_action(&ctx, &view);
            let measured = match (opts.time_source, started) {
                (Some(t), Some(s)) => Some(t.now().saturating_sub(s)),
                _ => None,
            };
            let mut reply = match reply {
                Ok(r) => r,
                Err(e) => break Err(agent_failure(&role, &e)),
            };
            if treatment.clock_mode.uses_wall_time() {
                if let Some(m) = measured {
                    reply.usage.generation_ms = Some(m);
                }
            }
            let problem = match parse_action(&reply.raw, &scenario) {
                Ok(a) if a.accepted && state.standing[scenario.opponent(&role)].is_empty() => {
                    EngineError::AcceptWithoutStandingOffer(role.clone()).to_string()
                }
                Ok(a) => break Ok((reply.raw, a, reply.usage)),
                Err(e) => describe(&e),
            };
            if retries >= opts.max_format_retries {
                break Err(format!(
                    "{role}: no usable action after {} attempts: {problem}",
                    retries + 1
                ));
            }
            log::debug!("{role}: re-requesting turn {}: {problem}", state.turn_index);
            retries += 1;
            note = Some(corrective_note(&problem));
        };

        let (raw, action, usage) = match attempt {
            Ok(ok) => ok,
            Err(msg) => {
                state.fail(msg);
                continue;
            }
        };

        let speech = speech_latency(&action.message);
        let generation = usage.generation_ms.unwrap_or_default();
        let cost = state.clock.utterance_cost(speech, generation, treatment.latency_enabled);
        match state.clock.charge(cost) {
            Charge::InsufficientTime => state.discard_over_budget(&role, raw, action, cost),
            Charge::Charged => state.apply_action(Utterance {
                raw,
                action,
                prefix,
                charged: cost,
                usage,
                retries,
            })?,
        }
    };

    Ok(Transcript {
        header: TranscriptHeader {
            schema_version: SCHEMA_VERSION,
            run_id: opts.run_id.clone(),
            cell_key: opts.cell_key.clone(),
            scenario: scenario.name.clone(),
            treatment: treatment.clone(),
            initiator: initiator.to_string(),
            seed,
        },
        events: state.events,
        outcome,
    })
}

fn agent_failure(role: &str, e: &AgentError) -> String {
    format!("{role}: agent failure: {e}")
}

fn describe(e: &ActionError) -> String {
    e.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled;
    use crate::temporal::Treatment;

    fn state(cfg: TreatmentConfig) -> NegotiationState {
        NegotiationState::new(Arc::new(bundled::new_recruit()), cfg, "hr").unwrap()
    }

    fn full_offer() -> Bundle {
        bundled::new_recruit().best_bundle("candidate")
    }

    #[test]
    fn merge_rules() {
        let empty = StandingOffer::default();
        let merged = merge_proposal(&empty, &full_offer(), 0);
        assert_eq!(merged.terms, full_offer());

        let s: Bundle = [("salary", "A"), ("vacation", "B")].into_iter().collect();
        let st = merge_proposal(&empty, &s, 0);
        let inc: Bundle = [("salary", "C")].into_iter().collect();
        let out = merge_proposal(&st, &inc, 2);
        assert_eq!(out.terms, [("salary", "C"), ("vacation", "B")].into_iter().collect());
        assert_eq!(out.provenance["salary"], 2);
        assert_eq!(out.provenance["vacation"], 0);

        assert_eq!(merge_proposal(&st, &Bundle::new(), 5), st);
    }

    #[test]
    fn accept_complete_offer() {
        let mut s = state(TreatmentConfig::timed(Treatment::Control, 300));
        s.apply_action(Utterance::scripted(ActionMessage::propose("offer", full_offer()), Millis(400)))
            .unwrap();
        assert!(s.is_running());
        assert_eq!(s.active_role, "candidate");
        s.apply_action(Utterance::scripted(ActionMessage::accept("deal"), Millis(400)))
            .unwrap();
        let o = s.outcome().unwrap();
        assert_eq!(o.kind, OutcomeKind::Deal);
        assert!(o.is_closed_deal());
        assert_eq!(o.payoffs["candidate"], 19200);
        assert_eq!(o.payoffs["hr"], 1800);
        assert_eq!(o.utterances, 2);
        assert_eq!(o.words_total, 2);
        assert_eq!(s.apply_action(Utterance::scripted(ActionMessage::talk("x"), Millis(0))), Err(EngineError::AlreadyEnded));
    }

    #[test]
    fn accept_ignores_attached_proposal() {
        let mut s = state(TreatmentConfig::turn_limited(9));
        s.apply_action(Utterance::scripted(ActionMessage::propose("o", full_offer()), Millis(0))).unwrap();
        let mut acc = ActionMessage::accept("ok");
        acc.proposal = Some(bundled::new_recruit().best_bundle("hr"));
        s.apply_action(Utterance::scripted(acc, Millis(0))).unwrap();
        assert_eq!(s.outcome().unwrap().agreed.as_ref(), Some(&full_offer()));
    }

    #[test]
    fn batna() {
        let mut s = state(TreatmentConfig::timed(Treatment::Control, 300));
        s.apply_action(Utterance::scripted(ActionMessage::batna("bye"), Millis(0))).unwrap();
        let o = s.outcome().unwrap();
        assert_eq!(o.kind, OutcomeKind::Batna);
        assert_eq!(o.batna_role.as_deref(), Some("hr"));
        assert_eq!(o.payoffs["hr"], 4500);
    }

    #[test]
    fn counter_passes_turn() {
        let mut s = state(TreatmentConfig::timed(Treatment::Control, 300));
        let p: Bundle = [("salary", "$39 000")].into_iter().collect();
        s.apply_action(Utterance::scripted(ActionMessage::propose("x", p.clone()), Millis(0))).unwrap();
        assert!(s.is_running());
        assert_eq!(s.active_role, "candidate");
        assert_eq!(s.standing["hr"].terms, p);
        assert_eq!(s.check_termination(), Termination::Continue);
    }

    #[test]
    fn accept_without_offer_is_rejected() {
        let mut s = state(TreatmentConfig::timed(Treatment::Control, 300));
        let err = s.apply_action(Utterance::scripted(ActionMessage::accept("ok"), Millis(0)));
        assert_eq!(err, Err(EngineError::AcceptWithoutStandingOffer("hr".into())));
        assert!(s.events.is_empty());
    }

    #[test]
    fn accept_partial_offer_flags_incomplete() {
        let mut s = state(TreatmentConfig::timed(Treatment::Control, 300));
        let p: Bundle = [("salary", "$44 000"), ("budget", "$2 500")].into_iter().collect();
        s.apply_action(Utterance::scripted(ActionMessage::propose("x", p), Millis(0))).unwrap();
        s.apply_action(Utterance::scripted(ActionMessage::accept("ok"), Millis(0))).unwrap();
        let o = s.outcome().unwrap();
        assert_eq!(o.kind, OutcomeKind::Deal);
        assert!(o.incomplete);
        assert!(!o.is_closed_deal());
        assert_eq!(o.payoffs["hr"], 1800);
        assert_eq!(o.payoffs["candidate"], 4800 + 3000);
    }

    #[test]
    fn turn_budget_exhaustion() {
        let mut s = state(TreatmentConfig::turn_limited(5));
        for _ in 0..5 {
            assert_eq!(s.settle(), Termination::Continue);
            s.apply_action(Utterance::scripted(ActionMessage::talk("hello"), Millis(400))).unwrap();
        }
        match s.settle() {
            Termination::Ended(o) => assert_eq!(o.kind, OutcomeKind::TurnExhausted),
            t => panic!("{t:?}"),
        }
    }

    #[test]
    fn timeout_beats_turn_exhaustion() {
        let mut cfg = TreatmentConfig::timed(Treatment::Control, 1);
        cfg.treatment = Treatment::Control;
        let mut s = state(cfg);
        s.turn_budget = Some(1);
        assert_eq!(s.clock.charge(Millis(1000)), Charge::Charged);
        s.apply_action(Utterance::scripted(ActionMessage::talk("a b"), Millis(1000))).unwrap();
        match s.settle() {
            Termination::Ended(o) => {
                assert_eq!(o.kind, OutcomeKind::Timeout);
                assert!(o.simultaneous_exhaustion);
            }
            t => panic!("{t:?}"),
        }
    }

    #[test]
    fn replay_matches_live_standing() {
        let mut s = state(TreatmentConfig::turn_limited(9));
        let a: Bundle = [("salary", "$39 000")].into_iter().collect();
        let b: Bundle = [("vacation", "5 d")].into_iter().collect();
        s.apply_action(Utterance::scripted(ActionMessage::propose("x", a), Millis(0))).unwrap();
        s.apply_action(Utterance::scripted(ActionMessage::propose("y", b), Millis(0))).unwrap();
        let replay = replay_standing(&s.scenario, &s.events);
        assert_eq!(replay.last().unwrap(), &s.standing);
    }
}
