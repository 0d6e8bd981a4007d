//! Ablation grid over moment-token count, TCL initialisation, memory
//! architecture and history length.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bundle::{Mode, PolicyBundle};
use crate::env::{TaskId, Trajectory};
use crate::error::{Error, Result};
use crate::harness::eval::{evaluate_policy, HeldOut, TaskEval};
use crate::training::{finetune_memory_variant, train_moment_tokens, TclConfig, TrainLog, VariantSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    /// Moment tokens of the current step only, no history.
    None,
    Concat,
    Rnn,
    Lstm,
    Gru,
    Transformer,
}

impl MemoryKind {
    pub const ALL: [MemoryKind; 6] = [
        MemoryKind::None,
        MemoryKind::Concat,
        MemoryKind::Rnn,
        MemoryKind::Lstm,
        MemoryKind::Gru,
        MemoryKind::Transformer,
    ];

    pub fn mode(self) -> Mode {
        match self {
            MemoryKind::None | MemoryKind::Concat => Mode::MomentConcat,
            MemoryKind::Rnn => Mode::Rnn,
            MemoryKind::Lstm => Mode::Lstm,
            MemoryKind::Gru => Mode::Gru,
            MemoryKind::Transformer => Mode::Hamlet,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MemoryKind::None => "none",
            MemoryKind::Concat => "concat",
            MemoryKind::Rnn => "rnn",
            MemoryKind::Lstm => "lstm",
            MemoryKind::Gru => "gru",
            MemoryKind::Transformer => "transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AblationAxes {
    pub n_moment: Vec<usize>,
    pub use_tcl_init: Vec<bool>,
    pub memory: Vec<MemoryKind>,
    pub history: Vec<usize>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self {
            n_moment: vec![4],
            use_tcl_init: vec![true],
            memory: vec![MemoryKind::Transformer],
            history: vec![4],
        }
    }
}

impl AblationAxes {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("ablation axis {what}")));
        if self.n_moment.is_empty() || self.use_tcl_init.is_empty() || self.memory.is_empty() || self.history.is_empty() {
            return bad("values must be non-empty");
        }
        if self.n_moment.iter().any(|n| ![1, 2, 4, 8, 16].contains(n)) {
            return bad("n_moment must be drawn from {1, 2, 4, 8, 16}");
        }
        if self.history.iter().any(|t| ![2, 4, 8].contains(t)) {
            return bad("history must be drawn from {2, 4, 8}");
        }
        Ok(())
    }

    /// Every combination, in axis order.
    pub fn cells(&self, base: &VariantSpec) -> Vec<(MemoryKind, VariantSpec)> {
        let mut out = Vec::new();
        for &n_moment in &self.n_moment {
            for &use_tcl_init in &self.use_tcl_init {
                for &memory in &self.memory {
                    for &history in &self.history {
                        let spec = VariantSpec {
                            mode: memory.mode(),
                            n_moment,
                            use_tcl_init,
                            history: if memory == MemoryKind::None { 1 } else { history },
                            ..base.clone()
                        };
                        out.push((memory, spec));
                    }
                }
            }
        }
        out
    }
}

/// Data and shared checkpoints the grid trains from.
pub struct GridContext<'a> {
    pub stage1: &'a PolicyBundle,
    pub demos: &'a [(TaskId, Vec<Trajectory>)],
    pub tcl: TclConfig,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub held_out: Option<HeldOut>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub label: String,
    pub memory: MemoryKind,
    pub spec: VariantSpec,
    pub evals: Vec<TaskEval>,
    pub logs: Vec<TrainLog>,
    pub wall_secs: f64,
    pub error: Option<String>,
}

pub fn cell_label(memory: MemoryKind, spec: &VariantSpec) -> String {
    format!(
        "{}_nm{}_T{}{}",
        memory.name(),
        spec.n_moment,
        spec.history,
        if spec.use_tcl_init { "" } else { "_no_tcl" }
    )
}

/// Trains and evaluates every grid cell on every task. Cells share the
/// evaluation seed; a failing cell is recorded and the grid moves on.
pub fn run_ablation_grid(ctx: &GridContext, axes: &AblationAxes, base: &VariantSpec, seed: u64) -> Result<Vec<GridCell>> {
    axes.validate()?;
    let mut stage2: BTreeMap<(TaskId, usize), PolicyBundle> = BTreeMap::new();
    let mut cells = Vec::new();
    for (memory, spec) in axes.cells(base) {
        let spec = VariantSpec { seed, ..spec };
        let start = Instant::now();
        let label = cell_label(memory, &spec);
        let mut evals = Vec::new();
        let mut logs = Vec::new();
        let mut run = || -> Result<()> {
            for (task, demos) in ctx.demos {
                let key = (*task, spec.n_moment);
                if !stage2.contains_key(&key) {
                    let mut s1 = ctx.stage1.clone();
                    s1.meta.memory.n_moment = spec.n_moment;
                    let (s2, log) = train_moment_tokens(&s1, demos, &ctx.tcl, seed)?;
                    logs.push(log);
                    stage2.insert(key, s2);
                }
                let (bundle, log) = finetune_memory_variant(&stage2[&key], demos, &spec)?;
                logs.push(log);
                evals.push(evaluate_policy(&bundle, *task, ctx.eval_episodes, ctx.eval_seed, ctx.held_out)?);
            }
            Ok(())
        };
        let error = run().err().map(|e| e.to_string());
        cells.push(GridCell {
            label,
            memory,
            spec,
            evals,
            logs,
            wall_secs: start.elapsed().as_secs_f64(),
            error,
        });
    }
    Ok(cells)
}
