//! Declarative run configuration (JSON).
//!
//! A [`RunConfig`] names either a canned scenario or an inline protocol.
//! With a scenario, any parameter block present in the config replaces the
//! scenario's block wholesale. Unknown keys anywhere are rejected.
//!
//! ```json
//! {
//!   "name": "short-drive",
//!   "protocol": [
//!     {"kind": "drive", "v_gate": -2.0, "duration": 3600},
//!     {"kind": "hold", "duration": 86400},
//!     {"kind": "read"}
//!   ],
//!   "model": {"kind": "regular", "omega_kt": 3.0},
//!   "circuit": {"r_ref": 2e7, "t_ref": 473.15, "ea_ion": 1.2},
//!   "initial": {"x1": 0.24, "x2": 0.5, "n1": 5e15, "n2": 5e17, "temperature": 473.15},
//!   "sampling": {"interval": 60},
//!   "seed": 7,
//!   "analyses": [{"kind": "charge"}]
//! }
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::AnalysisRequest;
use crate::cell::{CellState, CircuitParams};
use crate::conductance::ConductanceModel;
use crate::protocol::{Experiment, Sampling, Step};
use crate::scenarios;
use crate::thermal_energy;
use crate::thermo::{FreeEnergyModel, SolutionKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Crate version, recorded in run metadata.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("conflicting keys: {0}")]
    Conflict(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

impl ConfigError {
    fn invalid(key: &str, reason: impl ToString) -> Self {
        Self::Invalid { key: key.to_string(), reason: reason.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub kind: SolutionKind,
    #[serde(default)]
    pub mu0: f64,
    /// Ω in eV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    /// Ω in units of kT at the initial temperature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_kt: Option<f64>,
    #[serde(default)]
    pub kappa: f64,
}

impl ModelBlock {
    pub fn resolve(&self, temperature: f64) -> Result<FreeEnergyModel> {
        let model = match (self.kind, self.omega, self.omega_kt) {
            (SolutionKind::Ideal, None, None) => FreeEnergyModel::ideal(self.mu0),
            (SolutionKind::Ideal, _, _) => {
                return Err(ConfigError::Conflict("model.omega / model.omega_kt given for an ideal solution".into()))
            }
            (SolutionKind::Regular, Some(omega), None) => FreeEnergyModel::regular(self.mu0, omega),
            (SolutionKind::Regular, None, Some(a)) => {
                FreeEnergyModel::regular(self.mu0, a * thermal_energy(temperature))
            }
            (SolutionKind::Regular, None, None) => return Err(ConfigError::Missing("model.omega".into())),
            (SolutionKind::Regular, Some(_), Some(_)) => {
                return Err(ConfigError::Conflict("model.omega and model.omega_kt".into()))
            }
        }
        .with_kappa(self.kappa);
        model.validate().map_err(|e| ConfigError::invalid("model", e))?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    pub x1: f64,
    pub x2: f64,
    pub n1: f64,
    pub n2: f64,
    pub temperature: f64,
    #[serde(default)]
    pub q_accum: f64,
}

impl InitialBlock {
    pub fn state(&self) -> CellState {
        CellState { q_accum: self.q_accum, ..CellState::new(self.x1, self.x2, self.n1, self.n2, self.temperature) }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    /// Informational; written to metadata, ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Vec<Step>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circuit: Option<CircuitParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conductance: Option<ConductanceModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<Sampling>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyses: Option<Vec<AnalysisRequest>>,
}

/// A config resolved into something runnable.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub experiment: Experiment,
    pub analyses: Vec<AnalysisRequest>,
    /// Fully explicit config that reproduces this run.
    pub normalized: RunConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Replace the scenario reference by the scenario's own blocks,
    /// keeping any block given here.
    pub fn expand(&self) -> Result<RunConfig> {
        if let Some(v) = self.schema_version {
            if v != SCHEMA_VERSION {
                return Err(ConfigError::invalid("schema_version", format!("expected {SCHEMA_VERSION}, got {v}")));
            }
        }
        match (&self.scenario, &self.protocol) {
            (Some(_), Some(_)) => Err(ConfigError::Conflict("`scenario` and `protocol` are mutually exclusive".into())),
            (None, None) => Err(ConfigError::Missing("scenario or protocol".into())),
            (None, Some(_)) => Ok(self.clone()),
            (Some(name), None) => {
                let base = scenarios::scenario_config(name)?;
                Ok(RunConfig {
                    schema_version: self.schema_version.or(base.schema_version),
                    artifact_version: self.artifact_version.clone(),
                    name: self.name.clone().or(base.name).or_else(|| Some(name.clone())),
                    description: self.description.clone().or(base.description),
                    scenario: None,
                    protocol: base.protocol,
                    model: self.model.or(base.model),
                    circuit: self.circuit.or(base.circuit),
                    conductance: self.conductance.or(base.conductance),
                    initial: self.initial.or(base.initial),
                    sampling: self.sampling.or(base.sampling),
                    seed: self.seed.or(base.seed),
                    output_dir: self.output_dir.clone().or(base.output_dir),
                    analyses: self.analyses.clone().or(base.analyses),
                })
            }
        }
    }

    pub fn resolve(&self) -> Result<ResolvedRun> {
        let cfg = self.expand()?;
        let steps = cfg.protocol.clone().ok_or_else(|| ConfigError::Missing("protocol".into()))?;
        if steps.is_empty() {
            return Err(ConfigError::invalid("protocol", "must contain at least one step"));
        }
        for (i, step) in steps.iter().enumerate() {
            step.validate().map_err(|reason| ConfigError::Invalid { key: format!("protocol[{i}]"), reason })?;
        }
        let block = cfg.model.ok_or_else(|| ConfigError::Missing("model".into()))?;
        let circuit = cfg.circuit.ok_or_else(|| ConfigError::Missing("circuit".into()))?;
        let init = cfg.initial.ok_or_else(|| ConfigError::Missing("initial".into()))?;
        let conductance = cfg.conductance.unwrap_or_default();
        let sampling = cfg.sampling.unwrap_or_default();
        let model = block.resolve(init.temperature)?;
        circuit.validate().map_err(|e| ConfigError::invalid("circuit", e))?;
        conductance.validate().map_err(|e| ConfigError::invalid("conductance", e))?;
        sampling.validate().map_err(|e| ConfigError::invalid("sampling", e))?;
        let initial = init.state();
        initial.validate().map_err(|e| ConfigError::invalid("initial", e))?;
        let seed = cfg.seed.unwrap_or(0);
        let analyses = cfg.analyses.clone().unwrap_or_default();
        let normalized = RunConfig {
            schema_version: Some(SCHEMA_VERSION),
            artifact_version: Some(ARTIFACT_VERSION.to_string()),
            name: cfg.name.clone(),
            description: cfg.description.clone(),
            scenario: None,
            protocol: Some(steps.clone()),
            model: Some(ModelBlock {
                kind: model.kind,
                mu0: model.mu0,
                omega: (model.kind == SolutionKind::Regular).then_some(model.omega),
                omega_kt: None,
                kappa: model.kappa,
            }),
            circuit: Some(circuit),
            conductance: Some(conductance),
            initial: Some(init),
            sampling: Some(sampling),
            seed: Some(seed),
            output_dir: cfg.output_dir.clone(),
            analyses: Some(analyses.clone()),
        };
        Ok(ResolvedRun {
            experiment: Experiment { name: cfg.name, steps, model, circuit, conductance, initial, sampling, seed },
            analyses,
            normalized,
        })
    }

    /// Expanded copy with the value at a dotted path replaced, e.g.
    /// `circuit.r_ref` or `protocol.0.duration`. Setting `model.omega`
    /// clears `model.omega_kt` and vice versa.
    pub fn with_override(&self, path: &str, value: Value) -> Result<RunConfig> {
        let mut root = serde_json::to_value(self.expand()?).expect("config serialises");
        let parts: Vec<&str> = path.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::invalid("sweep.path", format!("malformed path `{path}`")));
        }
        let (last, parents) = parts.split_last().expect("non-empty path");
        let mut node = &mut root;
        for (depth, part) in parents.iter().enumerate() {
            let here = parts[..=depth].join(".");
            node = match node {
                Value::Object(map) => map.get_mut(*part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or(ConfigError::Missing(here))?;
        }
        match node {
            Value::Object(map) => {
                if parents == ["model"] {
                    match *last {
                        "omega" => map.remove("omega_kt"),
                        "omega_kt" => map.remove("omega"),
                        _ => None,
                    };
                }
                map.insert(last.to_string(), value);
            }
            Value::Array(items) => {
                let slot = last.parse::<usize>().ok().and_then(|i| items.get_mut(i));
                *slot.ok_or_else(|| ConfigError::Missing(path.to_string()))? = value;
            }
            _ => return Err(ConfigError::Missing(path.to_string())),
        }
        Self::from_value(root)
    }
}
