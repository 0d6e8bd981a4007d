//! A policy checkpoint: every parameter of one variant plus the configs
//! needed to run it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_expert::{self, ExpertConfig};
use crate::backbone::{self, BackboneConfig};
use crate::env::TaskId;
use crate::error::{Error, Result};
use crate::memory::{self, MemoryConfig};
use crate::recurrent::{self, CellKind};
use crate::tensor::{decode_checkpoint, encode_checkpoint, ParamRegistry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "STAGE1")]
    Stage1,
    #[serde(rename = "STAGE2")]
    Stage2,
    #[serde(rename = "STAGE3")]
    Stage3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleFrame,
    Hamlet,
    MultiFrame,
    MomentConcat,
    Rnn,
    Lstm,
    Gru,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::SingleFrame,
        Mode::Hamlet,
        Mode::MultiFrame,
        Mode::MomentConcat,
        Mode::Rnn,
        Mode::Lstm,
        Mode::Gru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SingleFrame => "single_frame",
            Mode::Hamlet => "hamlet",
            Mode::MultiFrame => "multi_frame",
            Mode::MomentConcat => "moment_concat",
            Mode::Rnn => "rnn",
            Mode::Lstm => "lstm",
            Mode::Gru => "gru",
        }
    }

    /// Modes that append moment tokens to the backbone input.
    pub fn uses_moments(self) -> bool {
        !matches!(self, Mode::SingleFrame | Mode::MultiFrame)
    }

    pub fn cell(self) -> Option<CellKind> {
        match self {
            Mode::Rnn => Some(CellKind::Rnn),
            Mode::Lstm => Some(CellKind::Lstm),
            Mode::Gru => Some(CellKind::Gru),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub stage: Stage,
    pub mode: Mode,
    pub backbone: BackboneConfig,
    pub expert: ExpertConfig,
    /// Moment count and history length for every moment mode; the layer
    /// fields only matter for the memory transformer.
    pub memory: MemoryConfig,
    pub tasks: Vec<TaskId>,
}

impl BundleMeta {
    pub fn chunk(&self) -> usize {
        self.expert.chunk
    }
}

#[derive(Clone, Debug)]
pub struct PolicyBundle {
    pub meta: BundleMeta,
    pub params: ParamRegistry,
}

/// Width of the expert's history slice for a mode.
pub fn hist_width(mode: Mode, mem: &MemoryConfig) -> usize {
    match mode {
        Mode::MomentConcat => mem.rows() * mem.d_model,
        _ => mem.n_moment * mem.d_model,
    }
}

impl PolicyBundle {
    /// Fresh single-frame policy, as trained in the first stage.
    pub fn init_stage1(backbone_cfg: &BackboneConfig, mem: &MemoryConfig, chunk: usize, tasks: &[TaskId], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamRegistry::new();
        backbone::init_params(&mut params, &mut rng, backbone_cfg)?;
        let expert = ExpertConfig {
            d_model: backbone_cfg.d_model,
            hist_width: hist_width(Mode::SingleFrame, mem),
            chunk,
            ..ExpertConfig::default()
        };
        action_expert::init_params(&mut params, &mut rng, &expert)?;
        Ok(Self {
            meta: BundleMeta {
                stage: Stage::Stage1,
                mode: Mode::SingleFrame,
                backbone: backbone_cfg.clone(),
                expert,
                memory: mem.clone(),
                tasks: tasks.to_vec(),
            },
            params,
        })
    }

    /// Copies every tensor whose name starts with one of `prefixes`.
    pub fn copy_from(&mut self, src: &PolicyBundle, prefixes: &[&str]) -> Result<()> {
        for p in prefixes {
            self.params.copy_prefix_from(&src.params, p)?;
        }
        Ok(())
    }

    /// A history-aware bundle built on `base`: backbone and moment tokens
    /// (when present) carried over, a new memory pathway for `mode`, and the
    /// expert widened with zeroed history rows.
    pub fn attach_memory(base: &PolicyBundle, mode: Mode, mem: &MemoryConfig, seed: u64) -> Result<Self> {
        if !mode.uses_moments() {
            return Err(Error::config(format!("{mode} has no memory pathway")));
        }
        mem.validate()?;
        if mem.d_model != base.meta.backbone.d_model {
            return Err(Error::config("memory width differs from the backbone's"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamRegistry::new();
        for p in base.params.iter().filter(|p| p.name.starts_with(backbone::PREFIX)) {
            params.add(p.name.clone(), p.value.clone(), false)?;
        }
        match base.params.get(memory::MOMENT_TOKENS) {
            Ok(t) if t.rows() == mem.n_moment => {
                params.add(memory::MOMENT_TOKENS, t.clone(), false)?;
            }
            _ => memory::init_moment_tokens(&mut params, &mut rng, mem.n_moment, mem.d_model)?,
        }
        match mode {
            Mode::Hamlet => memory::init_memory(&mut params, &mut rng, mem)?,
            m => {
                if let Some(kind) = m.cell() {
                    recurrent::init_params(&mut params, &mut rng, kind, mem.d_model)?;
                }
            }
        }
        let expert = ExpertConfig {
            hist_width: hist_width(mode, mem),
            ..base.meta.expert.clone()
        };
        action_expert::init_params(&mut params, &mut rng, &expert)?;
        action_expert::transplant(&mut params, &expert, &base.params, &base.meta.expert)?;
        Ok(Self {
            meta: BundleMeta {
                stage: Stage::Stage3,
                mode,
                backbone: base.meta.backbone.clone(),
                expert,
                memory: mem.clone(),
                tasks: base.meta.tasks.clone(),
            },
            params,
        })
    }

    pub fn has_memory_module(&self) -> bool {
        self.params.iter().any(|p| p.name.starts_with(memory::MEMORY_PREFIX))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_value(&self.meta).expect("meta serializes");
        encode_checkpoint(&self.params, &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = decode_checkpoint::<f32>(bytes)?;
        let meta: BundleMeta = serde_json::from_value(ck.meta)?;
        meta.backbone.validate()?;
        Ok(Self { meta, params: ck.params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_backbone() -> BackboneConfig {
        BackboneConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            ff: 32,
            ..BackboneConfig::default()
        }
    }

    fn small_mem() -> MemoryConfig {
        MemoryConfig {
            d_model: 16,
            heads: 2,
            ff: 32,
            ..MemoryConfig::default()
        }
    }

    #[test]
    fn round_trip_and_mode_names() {
        let b = PolicyBundle::init_stage1(&small_backbone(), &small_mem(), 4, &TaskId::ALL, 1).unwrap();
        let back = PolicyBundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back.meta, b.meta);
        assert_eq!(back.to_bytes(), b.to_bytes());
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("transformer".parse::<Mode>().is_err());
    }

    #[test]
    fn concat_has_no_memory_tensors() {
        let b = PolicyBundle::init_stage1(&small_backbone(), &small_mem(), 4, &TaskId::ALL, 1).unwrap();
        let c = PolicyBundle::attach_memory(&b, Mode::MomentConcat, &small_mem(), 2).unwrap();
        assert!(!c.has_memory_module());
        assert_eq!(c.meta.expert.input_width(), 16 + 16 * 16 + 16);
        let h = PolicyBundle::attach_memory(&b, Mode::Hamlet, &small_mem(), 2).unwrap();
        assert!(h.has_memory_module());
        assert!(PolicyBundle::attach_memory(&b, Mode::MultiFrame, &small_mem(), 2).is_err());
    }
}
