//! The structured action an agent emits each turn, and the lenient parser that
//! extracts it from free-form model output.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ActionError;
use crate::scenario::{Bundle, Scenario};

/// One parsed agent turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMessage {
    pub message: String,
    /// Issues the speaker put a (recognized) value on. `None` when nothing was proposed.
    pub proposal: Option<Bundle>,
    pub accepted: bool,
    pub taking_batna: bool,
}

impl ActionMessage {
    pub fn talk(message: impl Into<String>) -> Self {
        ActionMessage {
            message: message.into(),
            ..Default::default()
        }
    }

    pub fn propose(message: impl Into<String>, proposal: Bundle) -> Self {
        ActionMessage {
            message: message.into(),
            proposal: (!proposal.is_empty()).then_some(proposal),
            ..Default::default()
        }
    }

    pub fn accept(message: impl Into<String>) -> Self {
        ActionMessage {
            message: message.into(),
            accepted: true,
            ..Default::default()
        }
    }

    pub fn batna(message: impl Into<String>) -> Self {
        ActionMessage {
            message: message.into(),
            taking_batna: true,
            ..Default::default()
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.accepted || self.taking_batna
    }

    /// The wire JSON an agent would emit for this action.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("action serializes")
    }
}

/// Locate the first well-formed JSON object inside `raw`.
///
/// Prose, markdown code fences and trailing text around the object are ignored.
pub fn extract_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// Parse one agent output against `scenario`.
///
/// Proposal values are matched to canonical option labels; values outside an
/// issue's domain (or null) leave that issue unassigned. Missing flags read as
/// `false`.
pub fn parse_action(raw: &str, scenario: &Scenario) -> Result<ActionMessage, ActionError> {
    let obj = extract_json_object(raw).ok_or_else(|| ActionError::NoJsonFound { raw: raw.into() })?;
    let type_err = |field: &str, message: &str| ActionError::FieldTypeError {
        field: field.into(),
        message: message.into(),
        raw: raw.into(),
    };

    let message = match obj.get("message") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => return Err(type_err("message", "expected a string")),
        Some(_) => return Err(type_err("message", "expected a string")),
    };
    let flag = |field: &str| match obj.get(field) {
        None | Some(Value::Null) => Ok(false),
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(type_err(field, "expected true or false")),
    };
    let accepted = flag("accepted")?;
    let taking_batna = flag("taking_batna")?;
    if accepted && taking_batna {
        return Err(ActionError::BothFlagsTrue { raw: raw.into() });
    }

    let proposal = match obj.get("proposal") {
        None | Some(Value::Null) => None,
        Some(Value::Object(fields)) => {
            let mut bundle = Bundle::new();
            for (key, value) in fields {
                if scenario.issue(key).is_none() {
                    return Err(ActionError::UnknownIssueKey {
                        key: key.clone(),
                        raw: raw.into(),
                    });
                }
                let text = match value {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => n.to_string(),
                    _ => continue,
                };
                if let Some(label) = scenario.resolve_label(key, &text) {
                    bundle.set(key.clone(), label);
                }
            }
            (!bundle.is_empty()).then_some(bundle)
        }
        Some(_) => return Err(type_err("proposal", "expected an object or null")),
    };

    Ok(ActionMessage {
        message,
        proposal,
        accepted,
        taking_batna,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled;

    #[test]
    fn null_proposal() {
        let s = bundled::new_recruit();
        let a = parse_action(
            r#"{"message":"Hi","proposal":null,"accepted":false,"taking_batna":false}"#,
            &s,
        )
        .unwrap();
        assert_eq!(a, ActionMessage::talk("Hi"));
    }

    #[test]
    fn both_flags() {
        let s = bundled::new_recruit();
        let raw = r#"{"message":"Deal.","proposal":{"salary":"$39 000"},"accepted":true,"taking_batna":true}"#;
        let err = parse_action(raw, &s).unwrap_err();
        assert_eq!(err, ActionError::BothFlagsTrue { raw: raw.into() });
        assert_eq!(err.raw(), raw);
    }

    #[test]
    fn fenced_output_matches_direct_parse() {
        let s = bundled::new_recruit();
        let body = r#"{"message":"How about this?","proposal":{"salary":"$41,000","vacation":"7 d","budget":null},"accepted":false,"taking_batna":false}"#;
        let fenced = format!("Sure! Here is my move:\n```json\n{body}\n```\nThanks.");
        let direct = parse_action(body, &s).unwrap();
        assert_eq!(parse_action(&fenced, &s).unwrap(), direct);
        let p = direct.proposal.unwrap();
        assert_eq!(p.get("salary"), Some("$41 000"));
        assert_eq!(p.get("vacation"), Some("7 d"));
        assert_eq!(p.get("budget"), None);
    }

    #[test]
    fn errors() {
        let s = bundled::new_recruit();
        assert!(matches!(parse_action("no json here", &s), Err(ActionError::NoJsonFound { .. })));
        assert!(matches!(parse_action("{broken", &s), Err(ActionError::NoJsonFound { .. })));
        assert!(matches!(
            parse_action(r#"{"message":3}"#, &s),
            Err(ActionError::FieldTypeError { ref field, .. }) if field == "message"
        ));
        assert!(matches!(
            parse_action(r#"{"message":"x","accepted":"yes"}"#, &s),
            Err(ActionError::FieldTypeError { ref field, .. }) if field == "accepted"
        ));
        assert!(matches!(
            parse_action(r#"{"message":"x","proposal":[1]}"#, &s),
            Err(ActionError::FieldTypeError { ref field, .. }) if field == "proposal"
        ));
        assert!(matches!(
            parse_action(r#"{"message":"x","proposal":{"bonus":"1"}}"#, &s),
            Err(ActionError::UnknownIssueKey { ref key, .. }) if key == "bonus"
        ));
    }

    #[test]
    fn out_of_domain_values_are_unassigned() {
        let s = bundled::new_recruit();
        let a = parse_action(
            r#"{"message":"x","proposal":{"salary":"$40 000","location":"Phoenix","review":12,"insurance":true}}"#,
            &s,
        )
        .unwrap();
        let p = a.proposal.unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.get("location"), Some("Phoenix"));

        let a = parse_action(r#"{"message":"x","proposal":{"salary":"nope"}}"#, &s).unwrap();
        assert_eq!(a.proposal, None);
    }

    #[test]
    fn numeric_values_resolve() {
        let s = bundled::new_recruit();
        let a = parse_action(r#"{"message":"x","proposal":{"salary":44000}}"#, &s).unwrap();
        assert_eq!(a.proposal.unwrap().get("salary"), Some("$44 000"));
    }

    #[test]
    fn skips_non_object_braces() {
        let s = bundled::new_recruit();
        let raw = r#"I think {this} is fine. {"message":"ok","accepted":true}"#;
        assert!(parse_action(raw, &s).unwrap().accepted);
    }
}
