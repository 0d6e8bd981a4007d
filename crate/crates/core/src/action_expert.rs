//! Chunked categorical action head over `[h ‖ history ‖ proprio]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ProprioState, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, ParamRegistry, Real, Tensor, Var};

pub const PROPRIO_DIM: usize = 3;
pub const PROPRIO_EMBED: usize = 16;
pub const PREFIX: &str = "expert.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub d_model: usize,
    /// Width of the flattened history slice of the input.
    pub hist_width: usize,
    pub hidden: usize,
    pub chunk: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            hist_width: 4 * 64,
            hidden: 128,
            chunk: 4,
        }
    }
}

impl ExpertConfig {
    pub fn input_width(&self) -> usize {
        self.d_model + self.hist_width + PROPRIO_EMBED
    }

    pub fn macs(&self) -> u64 {
        (PROPRIO_DIM * PROPRIO_EMBED + self.input_width() * self.hidden + self.hidden * self.hidden + self.hidden * self.chunk * NUM_ACTIONS) as u64
    }
}

/// The history rows of the input projection start at zero so a fresh
/// history pathway leaves the policy unchanged.
pub fn init_params<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, cfg: &ExpertConfig) -> Result<()> {
    nn::add_linear(reg, rng, "expert.proprio", PROPRIO_DIM, PROPRIO_EMBED)?;
    nn::add_linear(reg, rng, "expert.in", cfg.input_width(), cfg.hidden)?;
    zero_history_rows(reg, cfg)?;
    nn::add_linear(reg, rng, "expert.hidden", cfg.hidden, cfg.hidden)?;
    nn::add_linear(reg, rng, "expert.out", cfg.hidden, cfg.chunk * NUM_ACTIONS)?;
    Ok(())
}

fn zero_history_rows(reg: &mut ParamRegistry, cfg: &ExpertConfig) -> Result<()> {
    let mut w = reg.get("expert.in.w")?.clone();
    let h = cfg.hidden;
    w.data_mut()[cfg.d_model * h..(cfg.d_model + cfg.hist_width) * h].fill(0.0);
    reg.set_value("expert.in.w", w)?;
    Ok(())
}

/// Copies a trained expert into `dst`, whose history slice may have a
/// different width. The readout and proprio rows carry over; the history rows
/// are zero.
pub fn transplant(dst: &mut ParamRegistry, dst_cfg: &ExpertConfig, src: &ParamRegistry, src_cfg: &ExpertConfig) -> Result<()> {
    if src_cfg.d_model != dst_cfg.d_model || src_cfg.hidden != dst_cfg.hidden || src_cfg.chunk != dst_cfg.chunk {
        return Err(Error::config("expert shapes differ beyond the history width"));
    }
    for name in [
        "expert.proprio.w",
        "expert.proprio.b",
        "expert.in.b",
        "expert.hidden.w",
        "expert.hidden.b",
        "expert.out.w",
        "expert.out.b",
    ] {
        dst.set_value(name, src.get(name)?.clone())?;
    }
    let h = src_cfg.hidden;
    let sw = src.get("expert.in.w")?.data();
    let mut w = vec![0.0f32; dst_cfg.input_width() * h];
    let d_rows = dst_cfg.d_model * h;
    w[..d_rows].copy_from_slice(&sw[..d_rows]);
    let tail = PROPRIO_EMBED * h;
    let n = w.len();
    w[n - tail..].copy_from_slice(&sw[sw.len() - tail..]);
    dst.set_value("expert.in.w", Tensor::new(vec![dst_cfg.input_width(), h], w)?)?;
    Ok(())
}

pub fn proprio_tensor<F: Real>(proprio: &[ProprioState]) -> Tensor<F> {
    let data = proprio.iter().flat_map(|p| p.to_array()).map(|v| F::of(v as f64)).collect();
    Tensor::new(vec![proprio.len(), PROPRIO_DIM], data).expect("proprio shape")
}

/// Chunk logits `[batch*k × |A|]`: row `b*k + j` scores step `j` of sample `b`.
/// `hist` is `[batch × hist_width]`; when absent zeros take its place.
pub fn predict_chunk<F: Real>(
    g: &mut Graph<F>,
    reg: &ParamRegistry<F>,
    cfg: &ExpertConfig,
    h: Var,
    hist: Option<Var>,
    proprio: &[ProprioState],
) -> Result<Var> {
    let hv = g.value(h);
    let batch = hv.rows();
    if hv.cols() != cfg.d_model || proprio.len() != batch {
        return Err(Error::Contract(format!(
            "expert input: h {:?} with {} proprio rows",
            hv.shape(),
            proprio.len()
        )));
    }
    let hist = match hist {
        Some(v) => {
            let s = g.value(v).shape();
            if s != [batch, cfg.hist_width] {
                return Err(Error::Contract(format!("history {s:?}, expected [{batch}, {}]", cfg.hist_width)));
            }
            Some(v)
        }
        None if cfg.hist_width > 0 => Some(g.constant(Tensor::zeros(&[batch, cfg.hist_width]))),
        None => None,
    };
    let s = g.constant(proprio_tensor(proprio));
    let s = nn::linear(g, reg, "expert.proprio", s)?;
    let parts: Vec<Var> = [Some(h), hist, Some(s)].into_iter().flatten().collect();
    let x = g.concat_last_axis(&parts)?;
    let x = nn::linear(g, reg, "expert.in", x)?;
    let x = g.relu(x)?;
    let x = nn::linear(g, reg, "expert.hidden", x)?;
    let x = g.relu(x)?;
    let logits = nn::linear(g, reg, "expert.out", x)?;
    Ok(g.reshape(logits, &[batch * cfg.chunk, NUM_ACTIONS])?)
}

/// Mean cross-entropy over every chunk position of every sample.
pub fn chunk_loss<F: Real>(g: &mut Graph<F>, logits: Var, expert: &[Action]) -> Result<Var> {
    let targets: Vec<usize> = expert.iter().map(|a| a.id()).collect();
    Ok(g.cross_entropy_from_logits(logits, &targets)?)
}

/// Per-row argmax, ties to the lowest action id.
pub fn decode_actions<F: Real>(logits: &Tensor<F>) -> Vec<Action> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            Action::from_id(best).expect("logit width is the action count")
        })
        .collect()
}

/// Fraction of positions where decoded and expert actions agree, counted per
/// whole chunk.
pub fn chunk_accuracy(pred: &[Action], expert: &[Action], k: usize) -> f64 {
    let n = pred.len() / k;
    if n == 0 {
        return 0.0;
    }
    let hits = pred.chunks(k).zip(expert.chunks(k)).filter(|(p, e)| p == e).count();
    hits as f64 / n as f64
}
