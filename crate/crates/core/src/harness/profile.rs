//! Per-decision cost of each variant: exact token and MAC counts, analytic
//! peak activation size, and measured latency.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::bundle::{Mode, PolicyBundle, Stage};
use crate::env::{episode_seed, reset, GridState, Instruction, Observation, ProprioState, TaskId};
use crate::error::{Error, Result};
use crate::memory::MemoryConfig;
use crate::policy::Episode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub variant: String,
    pub history: usize,
    pub tokens: usize,
    pub macs: u64,
    pub peak_scalars: u64,
    pub latency_ms: f64,
    pub latency_ratio: f64,
    pub macs_ratio: f64,
    pub peak_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub task: TaskId,
    pub warmup: usize,
    pub timesteps: usize,
    pub rows: Vec<EfficiencyRow>,
}

impl EfficiencyReport {
    pub fn row(&self, variant: &str, history: usize) -> Option<&EfficiencyRow> {
        self.rows.iter().find(|r| r.variant == variant && r.history == history)
    }
}

/// Backbone tokens of one decision.
pub fn backbone_tokens(bundle: &PolicyBundle, instr_len: usize) -> usize {
    let meta = &bundle.meta;
    let n_m = if meta.mode.uses_moments() { meta.memory.n_moment } else { 0 };
    meta.backbone.seq_len(instr_len, meta.backbone.frames, n_m)
}

/// Multiply-accumulates of one decision.
pub fn decision_macs(bundle: &PolicyBundle, instr_len: usize) -> u64 {
    let meta = &bundle.meta;
    let mut macs = backbone::forward_macs(&meta.backbone, backbone_tokens(bundle, instr_len)) + meta.expert.macs();
    match meta.mode {
        Mode::Hamlet => macs += meta.memory.macs(),
        m => {
            if let Some(kind) = m.cell() {
                macs += kind.macs(meta.memory.d_model);
            }
        }
    }
    macs
}

/// Largest live activation footprint of one decision.
pub fn decision_peak(bundle: &PolicyBundle, instr_len: usize) -> u64 {
    let meta = &bundle.meta;
    let bb = backbone::peak_activation_scalars(&meta.backbone, backbone_tokens(bundle, instr_len));
    let mem = if meta.mode == Mode::Hamlet { meta.memory.peak_activation_scalars() } else { 0 };
    bb.max(mem)
}

/// Untrained single-frame, HAMLET and multi-frame bundles for each history
/// length; costs do not depend on weights.
pub fn profiling_bundles(backbone_cfg: &BackboneConfig, mem: &MemoryConfig, chunk: usize, t_values: &[usize], seed: u64) -> Result<Vec<PolicyBundle>> {
    let base = PolicyBundle::init_stage1(backbone_cfg, mem, chunk, &TaskId::ALL, seed)?;
    let mut out = vec![base.clone()];
    for &t in t_values {
        let m = MemoryConfig { history: t, ..mem.clone() };
        out.push(PolicyBundle::attach_memory(&base, Mode::Hamlet, &m, seed)?);
        let bb = BackboneConfig { frames: t, ..backbone_cfg.clone() };
        bb.check_len(0)?;
        let mut multi = base.clone();
        multi.meta.stage = Stage::Stage3;
        multi.meta.mode = Mode::MultiFrame;
        multi.meta.backbone = bb.clone();
        multi.meta.memory.history = t;
        if t > 1 {
            backbone::add_frame_embeddings(&mut multi.params, &mut ChaCha8Rng::seed_from_u64(seed), &bb)?;
        }
        out.push(multi);
    }
    Ok(out)
}

fn history_of(bundle: &PolicyBundle) -> usize {
    match bundle.meta.mode {
        Mode::SingleFrame => 1,
        Mode::MultiFrame => bundle.meta.backbone.frames,
        _ => bundle.meta.memory.history,
    }
}

/// Mean after dropping the lowest and highest 5%.
pub fn trimmed_mean(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let cut = s.len() / 20;
    let kept = &s[cut..s.len() - cut];
    kept.iter().sum::<f64>() / kept.len() as f64
}

struct Stream {
    task: TaskId,
    seed: u64,
    episodes: u64,
    state: GridState,
    obs: Observation,
    proprio: ProprioState,
    instruction: Instruction,
    episode: Episode,
}

impl Stream {
    fn new(bundle: &PolicyBundle, task: TaskId, seed: u64) -> Self {
        let (state, obs, proprio, instruction) = reset(task, episode_seed(seed, 0));
        Self {
            task,
            seed,
            episodes: 1,
            state,
            obs,
            proprio,
            instruction,
            episode: bundle.new_episode(),
        }
    }

    /// One timed decision; the chunk is then executed.
    fn tick(&mut self, bundle: &PolicyBundle) -> Result<f64> {
        if self.state.is_done() {
            let (state, obs, proprio, instruction) = reset(self.task, episode_seed(self.seed, self.episodes));
            self.episodes += 1;
            (self.state, self.obs, self.proprio, self.instruction) = (state, obs, proprio, instruction);
            self.episode = bundle.new_episode();
        }
        let start = Instant::now();
        let d = bundle.act(&mut self.episode, &self.obs, &self.proprio, &self.instruction, false)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        for a in d.actions {
            if self.state.is_done() {
                break;
            }
            let out = self.state.step(a)?;
            self.obs = out.obs;
            self.proprio = out.proprio;
        }
        Ok(ms)
    }
}

/// Decisions per variant between switches; the first of each block re-warms
/// caches after the previous variant and is not timed.
const BLOCK: usize = 10;

/// Profiles every bundle on the same seeded episode stream. Variants take
/// turns in short blocks so slow drift of the machine hits all of them
/// alike; each variant's first `warmup` decisions are discarded. Runs on the
/// calling thread only.
pub fn profile_efficiency(bundles: &[PolicyBundle], task: TaskId, warmup: usize, timesteps: usize, seed: u64) -> Result<EfficiencyReport> {
    let base = bundles
        .iter()
        .position(|b| b.meta.mode == Mode::SingleFrame)
        .ok_or_else(|| Error::config("profiling needs a single-frame reference bundle"))?;
    if timesteps == 0 {
        return Err(Error::config("profiling needs at least one timed decision"));
    }
    let instr_len = reset(task, 0).3.tokens().len();
    let mut streams: Vec<Stream> = bundles.iter().map(|b| Stream::new(b, task, seed)).collect();
    for (stream, b) in streams.iter_mut().zip(bundles) {
        for _ in 0..warmup {
            stream.tick(b)?;
        }
    }
    let mut times = vec![Vec::with_capacity(timesteps); bundles.len()];
    while times[0].len() < timesteps {
        for (j, b) in bundles.iter().enumerate() {
            streams[j].tick(b)?;
            for _ in 1..BLOCK {
                let ms = streams[j].tick(b)?;
                if times[j].len() < timesteps {
                    times[j].push(ms);
                }
            }
        }
    }
    let latency: Vec<f64> = times.iter().map(|t| trimmed_mean(t)).collect();
    let macs: Vec<u64> = bundles.iter().map(|b| decision_macs(b, instr_len)).collect();
    let peak: Vec<u64> = bundles.iter().map(|b| decision_peak(b, instr_len)).collect();
    let rows = bundles
        .iter()
        .enumerate()
        .map(|(j, b)| EfficiencyRow {
            variant: b.meta.mode.name().to_string(),
            history: history_of(b),
            tokens: backbone_tokens(b, instr_len),
            macs: macs[j],
            peak_scalars: peak[j],
            latency_ms: latency[j],
            latency_ratio: latency[j] / latency[base],
            macs_ratio: macs[j] as f64 / macs[base] as f64,
            peak_ratio: peak[j] as f64 / peak[base] as f64,
        })
        .collect();
    Ok(EfficiencyReport {
        task,
        warmup,
        timesteps,
        rows,
    })
}

