use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::trace::TraceSpec;
use crate::device::{PimTopology, TimingParams};
use crate::model::ModelConfig;
use crate::plan::{Features, ParallelismPlan};
use crate::scheduler::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown model preset {0:?}")]
    UnknownModel(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A preset name or a full model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig, ConfigError> {
        let m = match self {
            ModelSpec::Preset(n) => ModelConfig::preset(n).ok_or_else(|| ConfigError::UnknownModel(n.clone()))?,
            ModelSpec::Custom(m) => m.clone(),
        };
        m.validate().map_err(ConfigError::Model)?;
        Ok(m)
    }
}

/// Simulator knobs that are neither hardware nor workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimKnobs {
    pub tokens_per_row: Option<u32>,
    pub max_new_tokens: u32,
    pub op_launch_cycles: u32,
}

impl Default for SimKnobs {
    fn default() -> Self {
        let d = SimConfig::default();
        SimKnobs {
            tokens_per_row: d.tokens_per_row,
            max_new_tokens: d.max_new_tokens,
            op_launch_cycles: d.op_launch_cycles,
        }
    }
}

/// One JSON document describing a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelSpec,
    pub topology: PimTopology,
    pub timing: TimingParams,
    pub plan: ParallelismPlan,
    pub features: Features,
    pub trace: TraceSpec,
    pub sim: SimKnobs,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelSpec::Preset("qwen-7b".into()),
            topology: PimTopology { nodes: 4, ..PimTopology::default() },
            timing: TimingParams::default(),
            plan: ParallelismPlan::new(8, 4),
            features: Features::all(),
            trace: TraceSpec::default(),
            sim: SimKnobs::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        Ok(SimConfig {
            model: self.model.resolve()?,
            topo: self.topology,
            timing: self.timing,
            plan: self.plan,
            features: self.features,
            tokens_per_row: self.sim.tokens_per_row,
            max_new_tokens: self.sim.max_new_tokens,
            op_launch_cycles: self.sim.op_launch_cycles,
            record_timeline: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_document_fills_defaults() {
        let c = Config::from_json(r#"{"model": "qwen-14b", "plan": {"tp": 4, "pp": 2}}"#).unwrap();
        assert_eq!(c.plan, ParallelismPlan::new(4, 2));
        assert_eq!(c.timing, TimingParams::default());
        assert_eq!(c.sim_config().unwrap().model.n_layers, 40);
    }

    #[test]
    fn round_trip() {
        let c = Config::default();
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_preset_is_an_error() {
        let c = Config::from_json(r#"{"model": "gpt-9"}"#).unwrap();
        assert!(matches!(c.sim_config(), Err(ConfigError::UnknownModel(_))));
    }
}
