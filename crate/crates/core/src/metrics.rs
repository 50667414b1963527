//! Per-negotiation outcome metrics, computed from a transcript alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{replay_standing, OutcomeKind};
use crate::error::ScenarioError;
use crate::scenario::{Points, Scenario};
use crate::transcript::Transcript;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationMetrics {
    pub outcome: OutcomeKind,
    pub closure: bool,
    pub incomplete_deal: bool,
    pub utterances: u32,
    pub words_total: u64,
    pub words_per_utterance: Option<f64>,
    /// Mean over utterances whose provider reported a count.
    pub reasoning_tokens_per_utterance: Option<f64>,
    /// 100 * closure / utterances: the share of utterances that closed a deal.
    pub pct_utterances_to_agreement: Option<f64>,
    /// Joint payoff of the first complete standing offer.
    pub first_offer_joint: Option<Points>,
    /// Agreed terms for a complete deal, else the last complete standing offer.
    pub final_offer_joint: Option<Points>,
    pub payoffs: BTreeMap<String, Points>,
    pub elapsed_secs: f64,
}

impl NegotiationMetrics {
    pub fn from_transcript(scenario: &Scenario, t: &Transcript) -> Result<Self, ScenarioError> {
        let o = &t.outcome;
        let utterances = t.events.len() as u32;
        let words_total: u64 = t.events.iter().map(|e| e.words as u64).sum();
        let reported: Vec<u64> = t.events.iter().filter_map(|e| e.reasoning_tokens).collect();
        let closure = o.is_closed_deal();

        let mut first = None;
        let mut last = None;
        for (event, standing) in t.events.iter().zip(replay_standing(scenario, &t.events)) {
            let offer = &standing[&event.role].terms;
            if event.action.proposal.is_some() && !event.action.is_terminal() && scenario.is_complete(offer) {
                let joint = scenario.joint_payoff(offer)?;
                first.get_or_insert(joint);
                last = Some(joint);
            }
        }
        if closure {
            if let Some(agreed) = &o.agreed {
                last = Some(scenario.joint_payoff(agreed)?);
            }
        }

        Ok(NegotiationMetrics {
            outcome: o.kind,
            closure,
            incomplete_deal: o.kind == OutcomeKind::Deal && o.incomplete,
            utterances,
            words_total,
            words_per_utterance: (utterances > 0).then(|| words_total as f64 / utterances as f64),
            reasoning_tokens_per_utterance: (!reported.is_empty())
                .then(|| reported.iter().sum::<u64>() as f64 / reported.len() as f64),
            pct_utterances_to_agreement: (utterances > 0)
                .then(|| if closure { 100.0 / utterances as f64 } else { 0.0 }),
            first_offer_joint: first,
            final_offer_joint: last,
            payoffs: o.payoffs.clone(),
            elapsed_secs: o.elapsed_ms.as_secs_f64(),
        })
    }
}
