//! Running a bundle: per-episode state, one decision per action chunk, and
//! the history pathway shared with training.

use crate::action_expert::{self, predict_chunk};
use crate::backbone::{self, tokenize, Frame};
use crate::bundle::{BundleMeta, Mode, PolicyBundle};
use crate::env::{Action, Instruction, Observation, ProprioState, NUM_CELLS};
use crate::error::{Error, Result};
use crate::memory::{self, MemoryBuffer};
use crate::nn;
use crate::recurrent::{self, CellKind, CellState};
use crate::tensor::{Graph, ParamRegistry, Real, Tensor, Var};

/// Attention summaries of one decision.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// Per moment token: last-layer backbone attention over the 49 cells,
    /// averaged over heads.
    pub moment_cells: Vec<Vec<f64>>,
    /// Memory attention of the current query rows, summed per history slot
    /// and averaged over heads and query rows (oldest slot first).
    pub memory_slots: Option<Vec<f64>>,
    /// Slots that held padding.
    pub padded_slots: Vec<bool>,
}

pub struct Decision {
    pub actions: Vec<Action>,
    pub logits: Tensor,
    pub trace: Option<AttentionTrace>,
}

/// Per-episode memory of a policy.
#[derive(Clone, Debug)]
pub struct Episode {
    t: usize,
    buffer: MemoryBuffer<f32>,
    frames: Vec<Frame>,
    cell: Option<(Tensor, Option<Tensor>)>,
}

impl Episode {
    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn buffer(&self) -> &MemoryBuffer<f32> {
        &self.buffer
    }
}

pub struct HistoryOut {
    /// `[batch × hist_width]`.
    pub hist: Var,
    pub memory_attn: Vec<Var>,
}

/// Recurrent pass over windows of pooled entries, right-aligned so every
/// window ends at the last step. Rows of shorter windows keep their start
/// state until their first entry.
pub fn recurrent_run<F: Real>(
    g: &mut Graph<F>,
    reg: &ParamRegistry<F>,
    kind: CellKind,
    pooled: Var,
    windows: &[Vec<usize>],
    init: Option<CellState>,
) -> Result<CellState> {
    let (n, d) = (g.value(pooled).rows(), g.value(pooled).cols());
    let batch = windows.len();
    let steps = windows.iter().map(Vec::len).max().unwrap_or(0);
    if steps == 0 {
        return Err(Error::Contract("empty recurrent window".into()));
    }
    let zero = g.constant(Tensor::zeros(&[1, d]));
    let table = g.concat_rows(&[pooled, zero])?;
    let mut state = match init {
        Some(s) => s,
        None => recurrent::zero_state(g, kind, batch, d),
    };
    for s in 0..steps {
        let active: Vec<bool> = windows.iter().map(|w| s + w.len() >= steps).collect();
        let idx: Vec<usize> = windows
            .iter()
            .zip(&active)
            .map(|(w, &a)| if a { w[s + w.len() - steps] } else { n })
            .collect();
        let x = g.embedding_gather(table, &idx)?;
        let next = recurrent::step(g, reg, kind, x, state)?;
        state = if active.iter().all(|&a| a) {
            next
        } else {
            let on: Vec<F> = active.iter().flat_map(|&a| std::iter::repeat_n(if a { F::one() } else { F::zero() }, d)).collect();
            let off: Vec<F> = on.iter().map(|&v| F::one() - v).collect();
            let on = g.constant(Tensor::new(vec![batch, d], on)?);
            let off = g.constant(Tensor::new(vec![batch, d], off)?);
            let mut blend = |new: Var, old: Var| -> Result<Var> {
                let a = g.mul(on, new)?;
                let b = g.mul(off, old)?;
                Ok(g.add(a, b)?)
            };
            let h = blend(next.h, state.h)?;
            let c = match (next.c, state.c) {
                (Some(nc), Some(oc)) => Some(blend(nc, oc)?),
                _ => None,
            };
            CellState { h, c }
        };
    }
    Ok(state)
}

/// History input of the expert for a batch of windows over `pool`, whose
/// entries are `n_m`-row blocks of moment outputs. Recurrent modes take
/// whole-episode windows; the others at most `T` entries.
pub fn history_input<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, meta: &BundleMeta, pool: Var, windows: &[Vec<usize>]) -> Result<HistoryOut> {
    let mem = &meta.memory;
    let n = mem.n_moment;
    match meta.mode {
        Mode::Hamlet => {
            let (rows, pad) = memory::window_rows(g, pool, n, mem.history, windows)?;
            let stack = memory::embed_stack(g, reg, mem, rows, &pad)?;
            let out = memory::consolidate(g, reg, mem, stack, &pad, false)?;
            Ok(HistoryOut {
                hist: memory::flatten_rows(g, out.feature, n)?,
                memory_attn: out.attn,
            })
        }
        Mode::MomentConcat => {
            let (rows, _) = memory::window_rows(g, pool, n, mem.history, windows)?;
            Ok(HistoryOut {
                hist: memory::flatten_rows(g, rows, mem.rows())?,
                memory_attn: Vec::new(),
            })
        }
        m => {
            let kind = m.cell().ok_or_else(|| Error::config(format!("{m} has no history input")))?;
            let pooled = g.mean_pool(pool, n)?;
            let state = recurrent_run(g, reg, kind, pooled, windows, None)?;
            Ok(HistoryOut {
                hist: recurrent::broadcast(g, state.h, n)?,
                memory_attn: Vec::new(),
            })
        }
    }
}

fn head_average(probs: &[f32], heads: usize, q_len: usize, k_len: usize, query: usize) -> Vec<f64> {
    let mut out = vec![0.0; k_len];
    for h in 0..heads {
        let base = (h * q_len + query) * k_len;
        for (o, &p) in out.iter_mut().zip(&probs[base..base + k_len]) {
            *o += p as f64 / heads as f64;
        }
    }
    out
}

impl PolicyBundle {
    pub fn new_episode(&self) -> Episode {
        let cap = if self.meta.mode.cell().is_some() { 1 } else { self.meta.memory.history };
        Episode {
            t: 0,
            buffer: MemoryBuffer::new(cap, self.meta.chunk()),
            frames: Vec::new(),
            cell: None,
        }
    }

    fn moment_tokens(&self, g: &mut Graph<f32>) -> Result<Var> {
        nn::param(g, &self.params, memory::MOMENT_TOKENS).map_err(Into::into)
    }

    /// One chunk decision at the episode's current timestep; advances the
    /// episode by `k` steps.
    pub fn act(&self, ep: &mut Episode, obs: &Observation, proprio: &ProprioState, instruction: &Instruction, trace: bool) -> Result<Decision> {
        let meta = &self.meta;
        let reg = &self.params;
        let mut g = Graph::new();
        let current = Frame::new(obs, proprio);
        let mode = meta.mode;
        let (h, hist, enc_attn, mem_attn, seq_len) = if mode.uses_moments() {
            let seq = tokenize(&meta.backbone, obs, proprio, instruction, meta.memory.n_moment, &[])?;
            let m = self.moment_tokens(&mut g)?;
            let enc = backbone::encode(&mut g, reg, &meta.backbone, std::slice::from_ref(&seq), Some(m))?;
            let moments = enc.moments.expect("moment slots present");
            ep.buffer.push(g.value(moments).clone(), ep.t)?;
            let (hist, mem_attn) = match mode {
                Mode::Hamlet => {
                    let (stack, pad) = memory::stack_history(&mut g, reg, &meta.memory, &[&ep.buffer])?;
                    let out = memory::consolidate(&mut g, reg, &meta.memory, stack, &pad, false)?;
                    (memory::flatten_rows(&mut g, out.feature, meta.memory.n_moment)?, out.attn.last().copied().map(|a| (a, pad)))
                }
                Mode::MomentConcat => {
                    let (stack, _) = {
                        let windows = vec![ep.buffer.entries()];
                        let entries: Vec<f32> = windows[0].iter().flat_map(|t| t.data().iter().copied()).collect();
                        let d = meta.memory.d_model;
                        let pool = g.constant(Tensor::new(vec![entries.len() / d, d], entries)?);
                        let idx: Vec<usize> = (0..windows[0].len()).collect();
                        memory::window_rows(&mut g, pool, meta.memory.n_moment, meta.memory.history, &[idx])?
                    };
                    (memory::flatten_rows(&mut g, stack, meta.memory.rows())?, None)
                }
                _ => {
                    let kind = mode.cell().expect("recurrent mode");
                    let pooled = g.mean_pool(moments, meta.memory.n_moment)?;
                    let init = ep.cell.as_ref().map(|(h, c)| CellState {
                        h: g.constant(h.clone()),
                        c: c.as_ref().map(|c| g.constant(c.clone())),
                    });
                    let state = recurrent_run(&mut g, reg, kind, pooled, &[vec![0]], init)?;
                    ep.cell = Some((g.value(state.h).clone(), state.c.map(|c| g.value(c).clone())));
                    (recurrent::broadcast(&mut g, state.h, meta.memory.n_moment)?, None)
                }
            };
            (enc.h, Some(hist), enc.attn, mem_attn, seq.len())
        } else {
            let history: Vec<Frame> = (1..meta.backbone.frames)
                .rev()
                .map(|j| {
                    let pos = ep.frames.len().saturating_sub(j);
                    ep.frames.get(pos).cloned().unwrap_or_else(|| current.clone())
                })
                .collect();
            let seq = tokenize(&meta.backbone, obs, proprio, instruction, 0, &history)?;
            let enc = backbone::encode(&mut g, reg, &meta.backbone, std::slice::from_ref(&seq), None)?;
            (enc.h, None, enc.attn, None, seq.len())
        };
        let logits = predict_chunk(&mut g, reg, &meta.expert, h, hist, std::slice::from_ref(proprio))?;
        let logits = g.value(logits).clone();
        let actions = action_expert::decode_actions(&logits);
        let trace = if trace && mode.uses_moments() {
            let last = *enc_attn.last().expect("at least one layer");
            let (spec, probs) = g.attention_probs(last).expect("attention op");
            let n_m = meta.memory.n_moment;
            let obs_start = instruction.0.len();
            let moment_cells = (seq_len - n_m..seq_len)
                .map(|q| head_average(probs, spec.heads, spec.q_len, spec.k_len, q)[obs_start..obs_start + NUM_CELLS].to_vec())
                .collect();
            let (memory_slots, padded_slots) = match mem_attn {
                Some((a, pad)) => {
                    let (spec, probs) = g.attention_probs(a).expect("attention op");
                    let t = meta.memory.history;
                    let mut slots = vec![0.0; t];
                    for q in 0..spec.q_len {
                        let row = head_average(probs, spec.heads, spec.q_len, spec.k_len, q);
                        for (j, p) in row.iter().enumerate() {
                            slots[j / n_m] += p / spec.q_len as f64;
                        }
                    }
                    let padded = (0..t).map(|s| pad[s * n_m]).collect();
                    (Some(slots), padded)
                }
                None => (None, Vec::new()),
            };
            Some(AttentionTrace {
                moment_cells,
                memory_slots,
                padded_slots,
            })
        } else {
            None
        };
        ep.frames.push(current);
        ep.t += meta.chunk();
        Ok(Decision { actions, logits, trace })
    }
}
