//! Recurrent memory baselines: one hidden state per episode, fed the
//! mean-pooled moment outputs of each chunk.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn;
use crate::tensor::{Graph, ParamRegistry, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn macs(self, d: usize) -> u64 {
        (2 * d * d * self.gates()) as u64
    }
}

pub fn init_params<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, kind: CellKind, d: usize) -> Result<()> {
    let g = kind.gates();
    nn::add_linear(reg, rng, "memory.cell.x", d, g * d)?;
    let scale = 1.0 / (d as f64).sqrt();
    reg.add("memory.cell.h.w", Tensor::uniform(&[d, g * d], scale, rng), false)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    /// LSTM cell memory.
    pub c: Option<Var>,
}

pub fn zero_state<F: Real>(g: &mut Graph<F>, kind: CellKind, batch: usize, d: usize) -> CellState {
    let h = g.constant(Tensor::zeros(&[batch, d]));
    let c = (kind == CellKind::Lstm).then(|| g.constant(Tensor::zeros(&[batch, d])));
    CellState { h, c }
}

/// One update from input `x` `[batch × d]`.
pub fn step<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, kind: CellKind, x: Var, state: CellState) -> Result<CellState> {
    let d = g.value(state.h).cols();
    let px = nn::linear(g, reg, "memory.cell.x", x)?;
    let wh = nn::param(g, reg, "memory.cell.h.w")?;
    let ph = g.matmul(state.h, wh)?;
    Ok(match kind {
        CellKind::Rnn => {
            let a = g.add(px, ph)?;
            CellState { h: g.tanh(a)?, c: None }
        }
        CellKind::Lstm => {
            let a = g.add(px, ph)?;
            let i = g.slice_cols(a, 0, d)?;
            let i = g.sigmoid(i)?;
            let f = g.slice_cols(a, d, 2 * d)?;
            let f = g.sigmoid(f)?;
            let u = g.slice_cols(a, 2 * d, 3 * d)?;
            let u = g.tanh(u)?;
            let o = g.slice_cols(a, 3 * d, 4 * d)?;
            let o = g.sigmoid(o)?;
            let c_prev = state.c.expect("lstm state carries a cell");
            let keep = g.mul(f, c_prev)?;
            let write = g.mul(i, u)?;
            let c = g.add(keep, write)?;
            let tc = g.tanh(c)?;
            CellState { h: g.mul(o, tc)?, c: Some(c) }
        }
        CellKind::Gru => {
            let xz = g.slice_cols(px, 0, d)?;
            let hz = g.slice_cols(ph, 0, d)?;
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z)?;
            let xr = g.slice_cols(px, d, 2 * d)?;
            let hr = g.slice_cols(ph, d, 2 * d)?;
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r)?;
            let xn = g.slice_cols(px, 2 * d, 3 * d)?;
            let hn = g.slice_cols(ph, 2 * d, 3 * d)?;
            let rn = g.mul(r, hn)?;
            let n = g.add(xn, rn)?;
            let n = g.tanh(n)?;
            // h' = (1 - z)·n + z·h
            let diff = g.sub(state.h, n)?;
            let zd = g.mul(z, diff)?;
            CellState { h: g.add(n, zd)?, c: None }
        }
    })
}

/// Hidden state `[batch × d]` repeated into the `[batch × n·d]` history slot.
pub fn broadcast<F: Real>(g: &mut Graph<F>, h: Var, n: usize) -> Result<Var> {
    Ok(g.concat_last_axis(&vec![h; n])?)
}
