//! Experiment configuration, validated against the published JSON schema
//! before anything runs.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::AblationAxes;
use crate::backbone::BackboneConfig;
use crate::bundle::Mode;
use crate::env::TaskId;
use crate::error::{Error, Result};
use crate::memory::MemoryConfig;
use crate::training::{StageConfig, TclConfig, VariantSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    /// Training demonstrations per task.
    pub episodes: usize,
    /// Held-out demonstrations per task for chunk accuracy and TCL margins.
    pub held_out: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { episodes: 300, held_out: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub t_values: Vec<usize>,
    pub warmup: usize,
    pub timesteps: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            t_values: vec![2, 4, 8],
            warmup: 20,
            timesteps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub demos: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            demos: "runs/demos".into(),
            checkpoints: "runs/checkpoints".into(),
            reports: "runs/reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tasks: Vec<TaskId>,
    pub demos: DemoConfig,
    pub chunk: usize,
    pub backbone: BackboneConfig,
    pub memory: MemoryConfig,
    pub stage1: StageConfig,
    pub tcl: TclConfig,
    pub variants: Vec<VariantSpec>,
    pub ablation: AblationAxes,
    pub eval: EvalConfig,
    pub profile: ProfileConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let variant = |mode| VariantSpec {
            mode,
            ..VariantSpec::default()
        };
        Self {
            seed: 0,
            tasks: TaskId::ALL.to_vec(),
            demos: DemoConfig::default(),
            chunk: 4,
            backbone: BackboneConfig::default(),
            memory: MemoryConfig::default(),
            stage1: StageConfig::new(20_000),
            tcl: TclConfig::default(),
            variants: vec![variant(Mode::SingleFrame), variant(Mode::Hamlet)],
            ablation: AblationAxes::default(),
            eval: EvalConfig::default(),
            profile: ProfileConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// The JSON schema every config file must satisfy.
pub fn config_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

impl ExperimentConfig {
    /// Schema check, then decoding, then cross-field checks.
    pub fn from_json_value(value: &serde_json::Value) -> Result<Self> {
        let schema = config_schema();
        let validator = jsonschema::validator_for(&schema).map_err(|e| Error::config(format!("invalid schema: {e}")))?;
        let errors: Vec<String> = validator
            .iter_errors(value)
            .map(|e| format!("{}: {e}", e.instance_path()))
            .collect();
        if !errors.is_empty() {
            return Err(Error::config(format!("config does not match schema: {}", errors.join("; "))));
        }
        let cfg: Self = serde_json::from_value(value.clone()).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config is not JSON: {e}")))?;
        Self::from_json_value(&value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        if self.chunk == 0 || self.demos.episodes == 0 || self.eval.episodes == 0 {
            return Err(Error::config("chunk, demo count and evaluation episodes must be positive"));
        }
        self.backbone.validate()?;
        self.backbone.check_len(self.memory.n_moment)?;
        if self.memory.d_model != self.backbone.d_model {
            return Err(Error::config("memory.d_model must equal backbone.d_model"));
        }
        self.memory.validate()?;
        for v in &self.variants {
            v.validate()?;
            if v.chunk != self.chunk {
                return Err(Error::config(format!("variant {} uses chunk {} but the experiment uses {}", v.label(), v.chunk, self.chunk)));
            }
            if v.mode == Mode::MultiFrame {
                BackboneConfig {
                    frames: v.history,
                    ..self.backbone.clone()
                }
                .check_len(0)?;
            }
        }
        self.ablation.validate()?;
        for &t in &self.profile.t_values {
            if t == 0 {
                return Err(Error::config("profile history lengths must be positive"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
