//! Offer-level records for the acceptance regression.

use serde::{Deserialize, Serialize};

use super::logistic::Design;
use crate::engine::replay_standing;
use crate::error::StatsError;
use crate::scenario::{Points, Scenario};
use crate::temporal::Treatment;
use crate::transcript::Transcript;

pub const REFERENCE_BUDGET: u64 = 240;
pub const DEADLINE_LEVELS: [u64; 3] = [240, 300, 360];

pub const TERMS: [&str; 5] = [
    "intercept",
    "deadline_300",
    "deadline_360",
    "time_aware",
    "recipient_payoff_k",
];

/// One delivered offer and whether the recipient accepted it next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferRecord {
    /// Negotiation id; the clustering unit.
    pub run_id: String,
    pub scenario: String,
    pub treatment: Treatment,
    pub budget_secs: Option<u64>,
    pub turn: u32,
    pub proposer: String,
    pub recipient: String,
    /// Recipient's own utility of the proposer's merged standing offer.
    pub recipient_payoff: Points,
    pub accepted: bool,
}

impl OfferRecord {
    pub fn deadline_300(&self) -> bool {
        self.budget_secs == Some(300)
    }

    pub fn deadline_360(&self) -> bool {
        self.budget_secs == Some(360)
    }

    pub fn time_aware(&self) -> bool {
        self.treatment == Treatment::TimeAware
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OfferTable {
    pub offers: Vec<OfferRecord>,
    /// Offer events skipped because the merged standing offer was incomplete.
    pub skipped_incomplete: usize,
}

/// Extract offer records from one transcript.
pub fn transcript_offers(scenario: &Scenario, t: &Transcript, table: &mut OfferTable) {
    let standing = replay_standing(scenario, &t.events);
    for (i, e) in t.events.iter().enumerate() {
        if e.action.proposal.is_none() || e.action.is_terminal() {
            continue;
        }
        let offer = &standing[i][&e.role].terms;
        let recipient = scenario.opponent(&e.role).to_string();
        let payoff = match scenario.is_complete(offer).then(|| scenario.utility(&recipient, offer)) {
            Some(Ok(p)) => p,
            _ => {
                table.skipped_incomplete += 1;
                continue;
            }
        };
        let accepted = t
            .events
            .get(i + 1)
            .is_some_and(|next| next.role == recipient && next.action.accepted);
        table.offers.push(OfferRecord {
            run_id: t.header.run_id.clone(),
            scenario: t.header.scenario.clone(),
            treatment: t.header.treatment.treatment,
            budget_secs: t.header.treatment.budget_secs,
            turn: e.turn,
            proposer: e.role.clone(),
            recipient,
            recipient_payoff: payoff,
            accepted,
        });
    }
}

pub fn offer_table<'a>(items: impl IntoIterator<Item = (&'a Scenario, &'a Transcript)>) -> OfferTable {
    let mut table = OfferTable::default();
    for (s, t) in items {
        transcript_offers(s, t, &mut table);
    }
    table
}

/// Regression design over Control and TimeAware offers at the three deadline
/// levels. Errors unless both treatments and all levels are present.
pub fn acceptance_design(offers: &[OfferRecord]) -> Result<Design, StatsError> {
    let usable: Vec<&OfferRecord> = offers
        .iter()
        .filter(|o| matches!(o.treatment, Treatment::Control | Treatment::TimeAware))
        .filter(|o| o.budget_secs.is_some_and(|b| DEADLINE_LEVELS.contains(&b)))
        .collect();
    if usable.is_empty() {
        return Err(StatsError::Empty);
    }
    for t in [Treatment::Control, Treatment::TimeAware] {
        if !usable.iter().any(|o| o.treatment == t) {
            return Err(StatsError::Dimension(format!("no {} offers", t.slug())));
        }
    }
    for level in DEADLINE_LEVELS {
        if !usable.iter().any(|o| o.budget_secs == Some(level)) {
            return Err(StatsError::Dimension(format!("no offers at the {level} s deadline")));
        }
    }
    let mut ids: Vec<&str> = usable.iter().map(|o| o.run_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut d = Design::new(TERMS.iter().map(|s| s.to_string()).collect());
    for o in usable {
        let cluster = ids.binary_search(&o.run_id.as_str()).expect("id present");
        let row = [
            1.0,
            o.deadline_300() as u8 as f64,
            o.deadline_360() as u8 as f64,
            o.time_aware() as u8 as f64,
            o.recipient_payoff as f64 / 1000.0,
        ];
        d.push(&row, o.accepted, cluster);
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use super::*;
    use crate::agents::{Agent, AgentSpec, ScriptedPolicy};
    use crate::engine::{run_negotiation, RunOptions};
    use crate::scenario::bundled;
    use crate::temporal::TreatmentConfig;

    fn run(hr: ScriptedPolicy, cand: ScriptedPolicy, treatment: Treatment, budget: u64) -> (Scenario, Transcript) {
        let s = bundled::new_recruit();
        let mut agents: BTreeMap<String, Box<dyn Agent>> = BTreeMap::new();
        agents.insert("hr".into(), AgentSpec::Scripted(hr).build(None).unwrap());
        agents.insert("candidate".into(), AgentSpec::Scripted(cand).build(None).unwrap());
        let cfg = TreatmentConfig::timed(treatment, budget);
        let t = run_negotiation(Arc::new(s.clone()), &mut agents, &cfg, "hr", 1, &RunOptions::default()).unwrap();
        (s, t)
    }

    #[test]
    fn one_offer_then_accept() {
        let (s, t) = run(
            ScriptedPolicy::NeverAgree { words: 5 },
            ScriptedPolicy::ThresholdAccepter { threshold: 0, words: 5 },
            Treatment::Control,
            240,
        );
        let table = offer_table([(&s, &t)]);
        assert_eq!(table.offers.len(), 1);
        let o = &table.offers[0];
        assert!(o.accepted);
        assert_eq!(o.recipient, "candidate");
        assert_eq!(o.recipient_payoff, s.utility("candidate", &s.best_bundle("hr")).unwrap());
    }

    #[test]
    fn batna_ending_has_no_accepted_offers() {
        let (s, t) = run(
            ScriptedPolicy::NeverAgree { words: 5 },
            ScriptedPolicy::FixedScript {
                actions: vec![
                    r#"{"message": "no", "proposal": null, "accepted": false, "taking_batna": false}"#.into(),
                    r#"{"message": "bye", "accepted": false, "taking_batna": true}"#.into(),
                ],
            },
            Treatment::TimeAware,
            300,
        );
        let table = offer_table([(&s, &t)]);
        assert_eq!(table.offers.len(), 2);
        assert!(table.offers.iter().all(|o| !o.accepted && o.deadline_300() && o.time_aware()));
    }

    #[test]
    fn design_requires_full_coverage() {
        let mk = |t, b, id: &str| OfferRecord {
            run_id: id.into(),
            scenario: "s".into(),
            treatment: t,
            budget_secs: Some(b),
            turn: 0,
            proposer: "a".into(),
            recipient: "b".into(),
            recipient_payoff: 12_000,
            accepted: false,
        };
        let mut offers = vec![mk(Treatment::Control, 240, "r1"), mk(Treatment::TimeAware, 300, "r2")];
        assert!(acceptance_design(&offers).is_err());
        offers.push(mk(Treatment::Control, 360, "r1"));
        offers.push(mk(Treatment::Urgency, 360, "r3"));
        let d = acceptance_design(&offers).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.cluster_count(), 2);
        assert_eq!(d.row(0), &[1.0, 0.0, 0.0, 0.0, 12.0]);
        assert_eq!(d.row(1), &[1.0, 1.0, 0.0, 1.0, 12.0]);
    }
}
