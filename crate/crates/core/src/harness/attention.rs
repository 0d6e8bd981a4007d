//! Per-step attention dumps of history-aware rollouts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::PolicyBundle;
use crate::env::{episode_seed, reset, TaskId, GRID};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStep {
    pub t: usize,
    /// Rendered cell tokens, row-major, for aligning the maps.
    pub obs: Vec<u8>,
    pub gripper: (usize, usize),
    /// One 7×7 map per moment token.
    pub moment_maps: Vec<Vec<Vec<f64>>>,
    /// Memory attention per history slot, oldest first.
    pub memory: Option<Vec<f64>>,
    pub padded: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub variant: String,
    pub task: TaskId,
    pub seed: u64,
    pub n_moment: usize,
    pub history: usize,
    pub steps: Vec<AttentionStep>,
    /// Mean entropy (nats) of the renormalised moment-to-cell maps.
    pub mean_cell_entropy: f64,
    /// Mean share of moment-to-cell attention on the gripper's cell.
    pub mean_gripper_mass: f64,
}

fn entropy(map: &[f64]) -> f64 {
    let total: f64 = map.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -map.iter().filter(|&&p| p > 0.0).map(|&p| (p / total) * (p / total).ln()).sum::<f64>()
}

/// Runs one seeded rollout and records its attention summaries.
pub fn attention_rollout(bundle: &PolicyBundle, task: TaskId, seed: u64) -> Result<AttentionDump> {
    let meta = &bundle.meta;
    if !meta.mode.uses_moments() {
        return Err(Error::config(format!("{} bundles have no moment or memory attention to export", meta.mode)));
    }
    let (mut state, mut obs, mut proprio, instruction) = reset(task, seed);
    let mut ep = bundle.new_episode();
    let mut steps = Vec::new();
    let (mut entropy_sum, mut gripper_sum, mut maps) = (0.0, 0.0, 0usize);
    while !state.is_done() {
        let t = ep.timestep();
        let d = bundle.act(&mut ep, &obs, &proprio, &instruction, true)?;
        let trace = d.trace.expect("moment modes always trace");
        let gripper = state.gripper();
        for m in &trace.moment_cells {
            entropy_sum += entropy(m);
            let total: f64 = m.iter().sum();
            if total > 0.0 {
                gripper_sum += m[gripper.1 * GRID + gripper.0] / total;
            }
            maps += 1;
        }
        steps.push(AttentionStep {
            t,
            obs: obs.cells.to_vec(),
            gripper,
            moment_maps: trace.moment_cells.iter().map(|m| m.chunks(GRID).map(<[f64]>::to_vec).collect()).collect(),
            memory: trace.memory_slots,
            padded: trace.padded_slots,
        });
        for a in d.actions {
            if state.is_done() {
                break;
            }
            let out = state.step(a)?;
            obs = out.obs;
            proprio = out.proprio;
        }
    }
    let per = maps.max(1) as f64;
    Ok(AttentionDump {
        variant: meta.mode.name().to_string(),
        task,
        seed,
        n_moment: meta.memory.n_moment,
        history: meta.memory.history,
        steps,
        mean_cell_entropy: entropy_sum / per,
        mean_gripper_mass: gripper_sum / per,
    })
}

/// Writes one JSON file per rollout into `out_dir`.
pub fn export_attention(bundle: &PolicyBundle, task: TaskId, seed: u64, rollouts: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(rollouts);
    for i in 0..rollouts as u64 {
        let dump = attention_rollout(bundle, task, episode_seed(seed, i))?;
        let path = out_dir.join(format!("attention_{}_{}_{i}.json", bundle.meta.mode.name(), task.name()));
        let text = serde_json::to_string_pretty(&dump)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
