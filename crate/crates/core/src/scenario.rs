//! Negotiation scenarios: issues, option domains, private payoff tables and
//! outside options.
//!
//! A scenario is loaded from a single JSON document, validated once, and then
//! shared read-only by every negotiation that uses it. All payoff arithmetic is
//! exact integer arithmetic over [`Points`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ScenarioError;

/// Utility points. Every payoff table entry is an integer and may be negative.
pub type Points = i64;

/// Case-insensitive label key: lowercase ASCII alphanumerics only.
///
/// `$39,000`, `39000` and `$39 000` all normalize to `39000`.
pub fn normalize_label(label: &str) -> String {
    label
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(|c| c.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionDef {
    pub label: String,
    pub points: BTreeMap<String, Points>,
    /// Extra spellings accepted when parsing proposals.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub id: String,
    pub display_name: String,
    pub options: Vec<OptionDef>,
}

impl Issue {
    pub fn option(&self, canonical_label: &str) -> Option<&OptionDef> {
        self.options.iter().find(|o| o.label == canonical_label)
    }

    pub fn points(&self, role: &str, canonical_label: &str) -> Option<Points> {
        self.option(canonical_label)
            .and_then(|o| o.points.get(role).copied())
    }

    fn best_for(&self, role: &str) -> &OptionDef {
        self.options
            .iter()
            .max_by_key(|o| o.points[role])
            .expect("validated issue has options")
    }

    fn worst_for(&self, role: &str) -> &OptionDef {
        self.options
            .iter()
            .min_by_key(|o| o.points[role])
            .expect("validated issue has options")
    }
}

/// Serialized form of a scenario file. See [`Scenario`] for the validated type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    name: String,
    roles: Vec<String>,
    issues: Vec<Issue>,
    batna_points: BTreeMap<String, Points>,
    declared_max: BTreeMap<String, Points>,
    system_prompts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    latency_addressee: BTreeMap<String, String>,
}

/// A validated two-role negotiation scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioDoc", into = "ScenarioDoc")]
pub struct Scenario {
    pub name: String,
    pub roles: [String; 2],
    pub issues: Vec<Issue>,
    pub batna_points: BTreeMap<String, Points>,
    pub declared_max: BTreeMap<String, Points>,
    pub system_prompts: BTreeMap<String, String>,
    /// Word naming the listener in the speech-latency paragraph, per role.
    pub latency_addressee: BTreeMap<String, String>,
    /// issue index -> normalized label -> option index
    lookup: Vec<HashMap<String, usize>>,
}

impl TryFrom<ScenarioDoc> for Scenario {
    type Error = ScenarioError;

    fn try_from(doc: ScenarioDoc) -> Result<Self, Self::Error> {
        Scenario::validate(doc)
    }
}

impl From<Scenario> for ScenarioDoc {
    fn from(s: Scenario) -> Self {
        ScenarioDoc {
            name: s.name,
            roles: s.roles.to_vec(),
            issues: s.issues,
            batna_points: s.batna_points,
            declared_max: s.declared_max,
            system_prompts: s.system_prompts,
            latency_addressee: s.latency_addressee,
        }
    }
}

/// Parse and validate a scenario document.
pub fn load_scenario(document: &str) -> Result<Scenario, ScenarioError> {
    let doc: ScenarioDoc =
        serde_json::from_str(document).map_err(|e| ScenarioError::Schema(e.to_string()))?;
    Scenario::validate(doc)
}

/// Read a scenario file from disk.
pub fn load_scenario_file(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    load_scenario(&text)
}

impl Scenario {
    fn validate(doc: ScenarioDoc) -> Result<Self, ScenarioError> {
        let roles: [String; 2] = match doc.roles.as_slice() {
            [a, b] if a != b => [a.clone(), b.clone()],
            _ => {
                return Err(ScenarioError::Invalid {
                    path: "roles".into(),
                    message: "exactly two distinct roles are required".into(),
                })
            }
        };
        if doc.issues.is_empty() {
            return Err(ScenarioError::Invalid {
                path: "issues".into(),
                message: "at least one issue is required".into(),
            });
        }

        let mut lookup = Vec::with_capacity(doc.issues.len());
        let mut seen_ids = HashMap::new();
        for (i, issue) in doc.issues.iter().enumerate() {
            let ipath = format!("issues[{i}] ({})", issue.id);
            if issue.id.is_empty() {
                return Err(invalid(&ipath, "empty issue id"));
            }
            if seen_ids.insert(issue.id.clone(), i).is_some() {
                return Err(invalid(&ipath, "duplicate issue id"));
            }
            if issue.options.len() < 2 {
                return Err(invalid(&ipath, "an issue needs at least 2 options"));
            }
            let mut index = HashMap::new();
            for (j, opt) in issue.options.iter().enumerate() {
                let opath = format!("{ipath}.options[{j}] ({})", opt.label);
                for role in &roles {
                    if !opt.points.contains_key(role) {
                        return Err(invalid(&opath, &format!("missing points for role `{role}`")));
                    }
                }
                if let Some(extra) = opt.points.keys().find(|r| !roles.contains(r)) {
                    return Err(invalid(&opath, &format!("points for unknown role `{extra}`")));
                }
                for spelling in std::iter::once(&opt.label).chain(&opt.aliases) {
                    let key = normalize_label(spelling);
                    if key.is_empty() {
                        return Err(invalid(&opath, "label normalizes to an empty string"));
                    }
                    if let Some(prev) = index.insert(key, j) {
                        if prev != j {
                            return Err(invalid(
                                &opath,
                                &format!("label `{spelling}` collides with option {prev}"),
                            ));
                        }
                    }
                }
            }
            lookup.push(index);
        }

        for (field, map) in [
            ("batna_points", &doc.batna_points),
            ("declared_max", &doc.declared_max),
        ] {
            for role in &roles {
                if !map.contains_key(role) {
                    return Err(invalid(field, &format!("missing role `{role}`")));
                }
            }
            if let Some(extra) = map.keys().find(|r| !roles.contains(r)) {
                return Err(invalid(field, &format!("unknown role `{extra}`")));
            }
        }
        for role in &roles {
            if !doc.system_prompts.contains_key(role) {
                return Err(invalid("system_prompts", &format!("missing role `{role}`")));
            }
        }

        let scenario = Scenario {
            name: doc.name,
            roles,
            issues: doc.issues,
            batna_points: doc.batna_points,
            declared_max: doc.declared_max,
            system_prompts: doc.system_prompts,
            latency_addressee: doc.latency_addressee,
            lookup,
        };
        for role in &scenario.roles {
            let computed = max_utility(&scenario.payoff_table(role));
            let declared = scenario.declared_max[role];
            if computed != declared {
                return Err(ScenarioError::DeclaredMaxMismatch {
                    path: format!("declared_max.{role}"),
                    declared,
                    computed,
                });
            }
        }
        Ok(scenario)
    }

    /// Canonical JSON for this scenario (pretty-printed, stable field order).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn issue(&self, id: &str) -> Option<&Issue> {
        self.issues.iter().find(|i| i.id == id)
    }

    fn issue_index(&self, id: &str) -> Option<usize> {
        self.issues.iter().position(|i| i.id == id)
    }

    pub fn has_role(&self, role: &str) -> bool {
        self.roles.iter().any(|r| r == role)
    }

    /// The role facing `role`. Panics on an unknown role.
    pub fn opponent(&self, role: &str) -> &str {
        match self.roles.iter().position(|r| r == role) {
            Some(0) => &self.roles[1],
            Some(_) => &self.roles[0],
            None => panic!("unknown role `{role}`"),
        }
    }

    /// Map a free-text value onto the issue's canonical option label.
    pub fn resolve_label(&self, issue_id: &str, value: &str) -> Option<&str> {
        let idx = self.issue_index(issue_id)?;
        let opt = *self.lookup[idx].get(&normalize_label(value))?;
        Some(&self.issues[idx].options[opt].label)
    }

    pub fn payoff_table(&self, role: &str) -> PayoffTable {
        assert!(self.has_role(role), "unknown role `{role}`");
        PayoffTable {
            role: role.to_string(),
            issues: self
                .issues
                .iter()
                .map(|issue| {
                    let opts = issue
                        .options
                        .iter()
                        .map(|o| (o.label.clone(), o.points[role]))
                        .collect();
                    (issue.id.clone(), opts)
                })
                .collect(),
        }
    }

    /// The bundle assigning every issue its best option for `role`.
    pub fn best_bundle(&self, role: &str) -> Bundle {
        self.issues
            .iter()
            .map(|i| (i.id.clone(), i.best_for(role).label.clone()))
            .collect()
    }

    /// The bundle assigning every issue its worst option for `role`.
    pub fn worst_bundle(&self, role: &str) -> Bundle {
        self.issues
            .iter()
            .map(|i| (i.id.clone(), i.worst_for(role).label.clone()))
            .collect()
    }

    pub fn is_complete(&self, bundle: &Bundle) -> bool {
        self.issues.iter().all(|i| bundle.get(&i.id).is_some())
    }

    /// Utility of `bundle` for `role`; the bundle must be complete.
    pub fn utility(&self, role: &str, bundle: &Bundle) -> Result<Points, ScenarioError> {
        utility(&self.payoff_table(role), bundle)
    }

    /// Sum of points over the issues that `bundle` assigns. Used for partial deals.
    pub fn partial_utility(&self, role: &str, bundle: &Bundle) -> Result<Points, ScenarioError> {
        let mut total = 0;
        for (issue_id, label) in bundle.iter() {
            let issue = self
                .issue(issue_id)
                .ok_or_else(|| ScenarioError::UnknownIssue(issue_id.to_string()))?;
            total += issue.points(role, label).ok_or_else(|| ScenarioError::UnknownLabel {
                issue: issue_id.to_string(),
                label: label.to_string(),
            })?;
        }
        Ok(total)
    }

    pub fn joint_payoff(&self, bundle: &Bundle) -> Result<Points, ScenarioError> {
        joint_payoff(self, bundle)
    }
}

fn invalid(path: &str, message: &str) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.to_string(),
        message: message.to_string(),
    }
}

/// One role's private payoff table: issue id -> ordered (label, points).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayoffTable {
    pub role: String,
    pub issues: Vec<(String, Vec<(String, Points)>)>,
}

impl PayoffTable {
    pub fn lookup(&self, issue_id: &str, label: &str) -> Option<Points> {
        self.issues
            .iter()
            .find(|(id, _)| id == issue_id)
            .and_then(|(_, opts)| opts.iter().find(|(l, _)| l == label))
            .map(|(_, p)| *p)
    }
}

/// An assignment of canonical option labels to issues. Possibly partial.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bundle(BTreeMap<String, String>);

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, issue_id: &str) -> Option<&str> {
        self.0.get(issue_id).map(String::as_str)
    }

    pub fn set(&mut self, issue_id: impl Into<String>, label: impl Into<String>) {
        self.0.insert(issue_id.into(), label.into());
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for Bundle {
    fn from_iter<T: IntoIterator<Item = (K, V)>>(iter: T) -> Self {
        Bundle(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

/// Additive utility: the sum of per-issue points of a complete bundle.
pub fn utility(table: &PayoffTable, bundle: &Bundle) -> Result<Points, ScenarioError> {
    let mut total = 0;
    for (issue_id, options) in &table.issues {
        let label = bundle
            .get(issue_id)
            .ok_or_else(|| ScenarioError::IncompleteBundle(issue_id.clone()))?;
        let points = options
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, p)| *p)
            .ok_or_else(|| ScenarioError::UnknownLabel {
                issue: issue_id.clone(),
                label: label.to_string(),
            })?;
        total += points;
    }
    if let Some((extra, _)) = bundle
        .iter()
        .find(|(id, _)| !table.issues.iter().any(|(i, _)| i == id))
    {
        return Err(ScenarioError::UnknownIssue(extra.to_string()));
    }
    Ok(total)
}

/// Sum of both roles' utilities.
pub fn joint_payoff(scenario: &Scenario, bundle: &Bundle) -> Result<Points, ScenarioError> {
    let [a, b] = &scenario.roles;
    Ok(scenario.utility(a, bundle)? + scenario.utility(b, bundle)?)
}

/// Highest attainable utility: the sum over issues of the best option.
pub fn max_utility(table: &PayoffTable) -> Points {
    table
        .issues
        .iter()
        .map(|(_, opts)| opts.iter().map(|(_, p)| *p).max().unwrap_or(0))
        .sum()
}

/// Lowest attainable utility.
pub fn min_utility(table: &PayoffTable) -> Points {
    table
        .issues
        .iter()
        .map(|(_, opts)| opts.iter().map(|(_, p)| *p).min().unwrap_or(0))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Compatible,
    Distributive,
    Integrative,
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IssueKind::Compatible => "compatible",
            IssueKind::Distributive => "distributive",
            IssueKind::Integrative => "integrative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IssueClass {
    pub kind: IssueKind,
    /// A role assigns equal points to two options, so order comparison is undefined.
    pub ties: bool,
}

/// Classify an issue by comparing the two roles' preference orders.
///
/// Compatible: both roles have the same unique best option. Distributive: the
/// orders are exact reverses. Anything else, including tied points, is
/// integrative.
pub fn classify_issue(scenario: &Scenario, issue_id: &str) -> Result<IssueClass, ScenarioError> {
    let issue = scenario
        .issue(issue_id)
        .ok_or_else(|| ScenarioError::UnknownIssue(issue_id.to_string()))?;
    let [a, b] = &scenario.roles;
    if issue.options.len() == 1 {
        return Ok(IssueClass { kind: IssueKind::Compatible, ties: false });
    }
    let has_ties = |role: &str| {
        let mut pts: Vec<Points> = issue.options.iter().map(|o| o.points[role]).collect();
        pts.sort_unstable();
        pts.windows(2).any(|w| w[0] == w[1])
    };
    if has_ties(a) || has_ties(b) {
        return Ok(IssueClass { kind: IssueKind::Integrative, ties: true });
    }
    let mut by_a: Vec<&OptionDef> = issue.options.iter().collect();
    by_a.sort_by_key(|o| std::cmp::Reverse(o.points[a]));
    let kind = if by_a[0].label == issue.best_for(b).label {
        IssueKind::Compatible
    } else if by_a.windows(2).all(|w| w[0].points[b] < w[1].points[b]) {
        IssueKind::Distributive
    } else {
        IssueKind::Integrative
    };
    Ok(IssueClass { kind, ties: false })
}

/// The scenarios that ship with the crate.
pub mod bundled {
    use super::{load_scenario, Scenario};

    pub const NEW_RECRUIT_JSON: &str = include_str!("../scenarios/new_recruit.json");
    pub const RUBBERMIND_JSON: &str = include_str!("../scenarios/rubbermind.json");

    pub fn new_recruit() -> Scenario {
        load_scenario(NEW_RECRUIT_JSON).expect("bundled New Recruit scenario is valid")
    }

    pub fn rubbermind() -> Scenario {
        load_scenario(RUBBERMIND_JSON).expect("bundled Rubbermind scenario is valid")
    }

    /// Look up a bundled scenario by name (`new_recruit`, `rubbermind`).
    pub fn by_name(name: &str) -> Option<Scenario> {
        match name {
            "new_recruit" => Some(new_recruit()),
            "rubbermind" => Some(rubbermind()),
            _ => None,
        }
    }
}
