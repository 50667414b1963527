//! Experiment grids: config schema, validation and deterministic expansion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::AgentSpec;
use crate::error::RunnerError;
use crate::scenario::{bundled, load_scenario_file, Scenario};
use crate::temporal::{ClockMode, Treatment, TreatmentConfig};

/// Agents per role; `default` covers roles without an explicit entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentPairing {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<AgentSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub by_role: BTreeMap<String, AgentSpec>,
}

impl AgentPairing {
    pub fn spec_for(&self, role: &str) -> Option<&AgentSpec> {
        self.by_role.get(role).or(self.default.as_ref())
    }

    pub fn any_remote(&self) -> bool {
        self.default.iter().chain(self.by_role.values()).any(AgentSpec::is_remote)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentName {
    Control,
    TimeAware,
    Urgency,
    TurnLimited,
    Baseline,
}

/// One block of cells: every listed treatment crossed with its budgets or turn limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub treatments: Vec<TreatmentName>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub budgets: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turns: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock_mode: Option<ClockMode>,
}

/// Run-config file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub name: String,
    /// Bundled scenario names or paths to scenario files (relative to the config file).
    pub scenarios: Vec<String>,
    pub conditions: Vec<ConditionSpec>,
    #[serde(default = "default_reps")]
    pub reps: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub latency_enabled: bool,
    #[serde(default)]
    pub clock_mode: ClockMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<AgentPairing>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_retries")]
    pub max_format_retries: u32,
    #[serde(default = "default_max_utterances")]
    pub max_utterances: u32,
    /// Shared request budget for remote agents (requests per second).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_per_sec: Option<f64>,
}

fn default_reps() -> u32 {
    100
}
fn default_true() -> bool {
    true
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_parallelism() -> usize {
    4
}
fn default_retries() -> u32 {
    2
}
fn default_max_utterances() -> u32 {
    crate::engine::DEFAULT_MAX_UTTERANCES
}

impl GridConfig {
    pub fn from_json(text: &str) -> Result<Self, RunnerError> {
        serde_json::from_str(text).map_err(|e| RunnerError::InvalidGrid(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RunnerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Treatment configs of every cell, in declaration order.
    pub fn treatments(&self) -> Result<Vec<TreatmentConfig>, RunnerError> {
        let mut out = Vec::new();
        for (ci, cond) in self.conditions.iter().enumerate() {
            let latency_enabled = cond.latency_enabled.unwrap_or(self.latency_enabled);
            let clock_mode = cond.clock_mode.unwrap_or(self.clock_mode);
            let bad = |m: &str| RunnerError::InvalidGrid(format!("conditions[{ci}]: {m}"));
            if cond.treatments.is_empty() {
                return Err(bad("no treatments listed"));
            }
            for &name in &cond.treatments {
                let configs: Vec<TreatmentConfig> = match name {
                    TreatmentName::TurnLimited => {
                        if !cond.budgets.is_empty() {
                            return Err(bad("turn_limited cannot take a time budget"));
                        }
                        if cond.turns.is_empty() {
                            return Err(bad("turn_limited needs `turns`"));
                        }
                        cond.turns
                            .iter()
                            .map(|&turns| TreatmentConfig {
                                treatment: Treatment::TurnLimited { turns },
                                budget_secs: None,
                                latency_enabled,
                                clock_mode,
                            })
                            .collect()
                    }
                    other => {
                        if !cond.turns.is_empty() {
                            return Err(bad("`turns` only applies to turn_limited"));
                        }
                        let treatment = match other {
                            TreatmentName::Control => Treatment::Control,
                            TreatmentName::TimeAware => Treatment::TimeAware,
                            TreatmentName::Urgency => Treatment::Urgency,
                            TreatmentName::Baseline => Treatment::Baseline,
                            TreatmentName::TurnLimited => unreachable!(),
                        };
                        if cond.budgets.is_empty() {
                            if treatment.is_timed() {
                                return Err(bad("timed treatments need `budgets`"));
                            }
                            vec![TreatmentConfig {
                                treatment,
                                budget_secs: None,
                                latency_enabled,
                                clock_mode,
                            }]
                        } else {
                            cond.budgets
                                .iter()
                                .map(|&b| TreatmentConfig {
                                    treatment,
                                    budget_secs: Some(b),
                                    latency_enabled,
                                    clock_mode,
                                })
                                .collect()
                        }
                    }
                };
                for cfg in configs {
                    cfg.validate()
                        .map_err(|e| bad(&format!("{}: {e}", cfg.label())))?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }

    /// Stable hash of everything that determines run contents.
    pub fn grid_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.parallelism = 0;
        canonical.rate_limit_per_sec = None;
        let json = serde_json::to_string(&canonical).expect("grid serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..6])
    }
}

/// One (scenario, treatment) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: String,
    pub scenario: String,
    pub treatment: TreatmentConfig,
}

/// One repetition of one cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub run_id: String,
    pub cell_key: String,
    pub cell_index: usize,
    pub rep: u32,
    pub initiator: String,
    pub seed: u64,
}

/// Per-run seed and id: both come from SHA-256 over (global seed, cell key, rep).
pub fn derive_run_seed(global_seed: u64, cell_key: &str, rep: u32) -> (u64, String) {
    let mut h = Sha256::new();
    h.update(b"negosim-run\0");
    h.update(global_seed.to_le_bytes());
    h.update(cell_key.as_bytes());
    h.update([0u8]);
    h.update(rep.to_le_bytes());
    let d = h.finalize();
    let seed = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (seed, hex::encode(&d[8..16]))
}

/// A grid with its scenarios loaded and agents resolved.
#[derive(Debug, Clone)]
pub struct Grid {
    pub config: GridConfig,
    pub scenarios: BTreeMap<String, Arc<Scenario>>,
    pub cells: Vec<Cell>,
    pub agents: AgentPairing,
}

impl Grid {
    /// Resolve scenarios (relative paths against `base_dir`) and validate.
    pub fn resolve(config: GridConfig, base_dir: &Path) -> Result<Self, RunnerError> {
        if config.reps == 0 {
            return Err(RunnerError::InvalidGrid("reps must be at least 1".into()));
        }
        if config.scenarios.is_empty() {
            return Err(RunnerError::InvalidGrid("no scenarios listed".into()));
        }
        let agents = config
            .agents
            .clone()
            .ok_or_else(|| RunnerError::InvalidGrid("no agents configured".into()))?;

        let mut scenarios = BTreeMap::new();
        let mut order = Vec::new();
        for entry in &config.scenarios {
            let scenario = match bundled::by_name(entry) {
                Some(s) => s,
                None => load_scenario_file(base_dir.join(entry))?,
            };
            for role in &scenario.roles {
                let spec = agents.spec_for(role).ok_or_else(|| {
                    RunnerError::InvalidGrid(format!(
                        "no agent for role `{role}` of scenario `{}`",
                        scenario.name
                    ))
                })?;
                spec.validate()?;
            }
            order.push(scenario.name.clone());
            if scenarios.insert(scenario.name.clone(), Arc::new(scenario)).is_some() {
                return Err(RunnerError::InvalidGrid(format!("scenario `{entry}` listed twice")));
            }
        }

        let treatments = config.treatments()?;
        let mut cells = Vec::new();
        let mut keys = BTreeSet::new();
        for name in &order {
            for t in &treatments {
                let key = format!("{name}__{}", t.label());
                if !keys.insert(key.clone()) {
                    return Err(RunnerError::InvalidGrid(format!("duplicate cell `{key}`")));
                }
                cells.push(Cell {
                    key,
                    scenario: name.clone(),
                    treatment: t.clone(),
                });
            }
        }
        Ok(Grid {
            config,
            scenarios,
            cells,
            agents,
        })
    }

    /// Every (cell, rep) in cell-major order. Even reps start with the
    /// scenario's first role, odd reps with the second.
    pub fn expand(&self) -> Vec<RunSpec> {
        let mut runs = Vec::with_capacity(self.cells.len() * self.config.reps as usize);
        for (ci, cell) in self.cells.iter().enumerate() {
            let roles = &self.scenarios[&cell.scenario].roles;
            for rep in 0..self.config.reps {
                let (seed, run_id) = derive_run_seed(self.config.seed, &cell.key, rep);
                runs.push(RunSpec {
                    run_id,
                    cell_key: cell.key.clone(),
                    cell_index: ci,
                    rep,
                    initiator: roles[rep as usize % 2].clone(),
                    seed,
                });
            }
        }
        runs
    }

    pub fn grid_hash(&self) -> String {
        self.config.grid_hash()
    }

    pub fn output_root(&self) -> PathBuf {
        self.config.output_dir.join(self.grid_hash())
    }
}

/// Convenience: load a config file, attach agents if given, and resolve.
pub fn expand_grid(config: &GridConfig, base_dir: &Path) -> Result<Vec<RunSpec>, RunnerError> {
    Ok(Grid::resolve(config.clone(), base_dir)?.expand())
}
