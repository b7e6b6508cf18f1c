//! Scenario files: strict TOML with dotted `--set` overrides.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::AppError;
use crate::chanpred::ChanpredConfig;
use crate::fedft::FedftConfig;
use crate::micro::{AdversaryStrategy, Microservice, OrchestrateConfig, RequestFlow, RoutingPolicy};
use crate::netsim::{NodeId, TopologyConfig};
use crate::tparallel::{Activation, PlanMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    /// Output directory when neither `--out` nor the environment sets one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fedft: Option<FedftConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tparallel: Option<TparallelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro: Option<MicroConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chanpred: Option<ChanpredConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TparallelConfig {
    pub server: NodeId,
    pub devices: Vec<NodeId>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Loop depth; above 1 the `k × n` block must be square.
    #[serde(default = "one")]
    pub depth: usize,
    #[serde(default)]
    pub mode: PlanMode,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub t0_s: f64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployMethod {
    Greedy,
    Bruteforce,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroConfig {
    pub services: Vec<Microservice>,
    pub flows: Vec<RequestFlow>,
    #[serde(default)]
    pub deploy: DeployMethod,
    /// Explicit replica placement for orchestration and as the starting
    /// point of migration; greedy deployment is used when empty.
    #[serde(default)]
    pub plan: BTreeMap<String, Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orchestrate: Option<OrchestrateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub migrate: Option<MigrateSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrchestrateSection {
    pub policies: Vec<RoutingPolicy>,
    pub adversaries: Vec<AdversaryStrategy>,
    #[serde(default = "slots")]
    pub slots: usize,
    #[serde(default = "slot_s")]
    pub slot_s: f64,
    #[serde(default = "cost_weight")]
    pub cost_weight: f64,
}

impl OrchestrateSection {
    pub fn config(&self) -> OrchestrateConfig {
        OrchestrateConfig { slots: self.slots, slot_s: self.slot_s, cost_weight: self.cost_weight }
    }
}

fn slots() -> usize {
    OrchestrateConfig::default().slots
}

fn slot_s() -> f64 {
    1.0
}

fn cost_weight() -> f64 {
    OrchestrateConfig::default().cost_weight
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigrateSection {
    pub v: f64,
    pub budget: f64,
    /// Nodes the user attaches to while moving.
    pub access: Vec<NodeId>,
    #[serde(default = "horizon")]
    pub slots: usize,
    #[serde(default = "slot_s")]
    pub slot_s: f64,
    #[serde(default = "handoff")]
    pub handoff_s: f64,
    /// Probability of staying put each slot.
    #[serde(default = "stay")]
    pub stay: f64,
    #[serde(default)]
    pub start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_s: Option<f64>,
}

fn horizon() -> usize {
    100
}

fn handoff() -> f64 {
    0.5
}

fn stay() -> f64 {
    0.8
}

/// Parses an override value as a TOML literal, falling back to a bare
/// string.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), AppError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| AppError::ConfigParse {
        message: format!("override `{spec}` is not of the form key=value"),
        key: None,
        suggestion: None,
    })?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AppError::ConfigParse { message: format!("bad override key `{key}`"), key: Some(key.into()), suggestion: None });
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| AppError::ConfigParse {
            message: format!("`{p}` in override `{key}` is not a table"),
            key: Some(key.into()),
            suggestion: None,
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

/// Backtick-quoted tokens of a deserializer message.
fn quoted(msg: &str) -> Vec<&str> {
    msg.split('`').skip(1).step_by(2).collect()
}

fn unknown_field_error(path: &str, msg: &str) -> Option<AppError> {
    let rest = msg.split("unknown field `").nth(1)?;
    let field = rest.split('`').next()?;
    let candidates = quoted(rest.split_once("expected").map_or("", |x| x.1));
    let suggestion = candidates
        .iter()
        .map(|c| (strsim::levenshtein(field, c), *c))
        .min()
        .map(|(_, c)| c.to_string());
    let key = match path {
        "" | "." => field.to_string(),
        p if p.ends_with(field) => p.to_string(),
        p => format!("{p}.{field}"),
    };
    let hint = suggestion.as_deref().map(|s| format!("; did you mean `{s}`?")).unwrap_or_default();
    Some(AppError::ConfigParse { message: format!("unknown key `{key}`{hint}"), key: Some(key), suggestion })
}

impl Scenario {
    pub fn from_table(table: toml::Table) -> Result<Self, AppError> {
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().to_string();
            unknown_field_error(&path, &msg).unwrap_or(AppError::ConfigParse {
                message: if path == "." { msg } else { format!("{path}: {msg}") },
                key: (path != ".").then_some(path),
                suggestion: None,
            })
        })
    }

    /// Parses `text` and applies `overrides` in order before validation.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, AppError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| AppError::ConfigParse {
            message: e.message().to_string(),
            key: None,
            suggestion: None,
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> Result<String, AppError> {
        toml::to_string(self).map_err(|e| AppError::Io { path: "manifest.toml".into(), message: e.to_string() })
    }
}
