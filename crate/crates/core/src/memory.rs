//! Moment tokens, their time-contrastive objective, and the causal memory
//! module that consolidates moment outputs across timesteps.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CellToken, Observation, GRID};
use crate::error::{Error, Result};
use crate::nn::{self, BlockInput};
use crate::tensor::{Graph, ParamRegistry, Real, Tensor, Var};

pub const MOMENT_TOKENS: &str = "moment.tokens";
pub const MEMORY_PREFIX: &str = "memory.";
pub const PROJ_PREFIX: &str = "proj.";

pub fn init_moment_tokens<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, n_moment: usize, d: usize) -> Result<()> {
    Ok(nn::add_embedding(reg, rng, MOMENT_TOKENS, n_moment, d)?)
}

/// Two-layer projection `d → d → d_proj` applied to mean-pooled moment outputs.
pub fn init_projection<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, d: usize, d_proj: usize) -> Result<()> {
    nn::add_linear(reg, rng, "proj.l1", d, d)?;
    nn::add_linear(reg, rng, "proj.l2", d, d_proj)?;
    Ok(())
}

/// `moments` is `[batch*n_m × d]`; returns `[batch × d_proj]`.
pub fn project<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, moments: Var, n_moment: usize) -> Result<Var> {
    let pooled = g.mean_pool(moments, n_moment)?;
    let x = nn::linear(g, reg, "proj.l1", pooled)?;
    let x = g.relu(x)?;
    nn::linear(g, reg, "proj.l2", x).map_err(Into::into)
}

/// Two-way contrastive loss with one positive and one negative per anchor,
/// averaged over anchors.
pub fn tcl_loss<F: Real>(g: &mut Graph<F>, z: Var, z_pos: Var, z_neg: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    let sp = g.cosine_similarity(z, z_pos)?;
    let sn = g.cosine_similarity(z, z_neg)?;
    let logits = g.concat_last_axis(&[sp, sn])?;
    let logits = g.scale(logits, F::of(1.0 / tau))?;
    let n = g.value(logits).rows();
    Ok(g.cross_entropy_from_logits(logits, &vec![0; n])?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_occlusion: f64,
    pub p_noise: f64,
    pub p_jitter: f64,
    pub noise_rate: f64,
    pub max_rect: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_occlusion: 0.5,
            p_noise: 0.5,
            p_jitter: 0.5,
            noise_rate: 0.05,
            max_rect: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub obs: Observation,
    /// Seed for embedding noise when the jitter perturbation was drawn.
    pub jitter: Option<u64>,
}

fn occlude<R: Rng>(obs: &mut Observation, rng: &mut R, max_rect: usize) {
    let w = rng.random_range(1..=max_rect.clamp(1, GRID));
    let h = rng.random_range(1..=max_rect.clamp(1, GRID));
    let x0 = rng.random_range(0..=GRID - w);
    let y0 = rng.random_range(0..=GRID - h);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            obs.cells[y * GRID + x] = CellToken::Mask as u8;
        }
    }
}

fn add_noise<R: Rng>(obs: &mut Observation, rng: &mut R, rate: f64) {
    for c in obs.cells.iter_mut() {
        if rng.random_bool(rate.clamp(0.0, 1.0)) {
            *c = rng.random_range(0..CellToken::Mask as u8);
        }
    }
}

/// Perturbed view of `obs`: occlusion, cell noise and embedding jitter, each
/// drawn independently. Draws that leave the view unchanged are redrawn; if
/// the probabilities make that impossible an occlusion is forced.
pub fn augment_observation<R: Rng>(obs: &Observation, rng: &mut R, cfg: &AugmentConfig) -> AugmentedView {
    for _ in 0..16 {
        let mut out = obs.clone();
        if rng.random_bool(cfg.p_occlusion.clamp(0.0, 1.0)) {
            occlude(&mut out, rng, cfg.max_rect);
        }
        if rng.random_bool(cfg.p_noise.clamp(0.0, 1.0)) {
            add_noise(&mut out, rng, cfg.noise_rate);
        }
        let jitter = rng.random_bool(cfg.p_jitter.clamp(0.0, 1.0)).then(|| rng.random());
        if jitter.is_some() || out != *obs {
            return AugmentedView { obs: out, jitter };
        }
    }
    let mut out = obs.clone();
    occlude(&mut out, rng, cfg.max_rect);
    let jitter = (out == *obs).then(|| rng.random());
    AugmentedView { obs: out, jitter }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub n_moment: usize,
    /// Buffer length T.
    pub history: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            ff: 128,
            n_moment: 4,
            history: 4,
        }
    }
}

impl MemoryConfig {
    /// Rows of the stacked history, `T · n_m`.
    pub fn rows(&self) -> usize {
        self.history * self.n_moment
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads.max(1) != 0 || self.heads == 0 {
            return Err(Error::config("memory width not divisible by its heads"));
        }
        if self.layers == 0 || self.n_moment == 0 || self.history == 0 {
            return Err(Error::config("memory layers, n_moment and history must be positive"));
        }
        Ok(())
    }

    /// One consolidation: every layer but the last updates all rows, the last
    /// only the final `n_m`.
    pub fn macs(&self) -> u64 {
        let l = self.rows();
        (0..self.layers)
            .map(|i| {
                let q = if i + 1 == self.layers { self.n_moment } else { l };
                nn::block_macs(self.d_model, self.ff, 0, l, q)
            })
            .sum()
    }

    pub fn peak_activation_scalars(&self) -> u64 {
        let (d, ff, h, n) = (self.d_model as u64, self.ff as u64, self.heads as u64, self.rows() as u64);
        (n * d * 6 + h * n * n).max(n * d * 3 + n * ff)
    }
}

pub fn init_memory<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, cfg: &MemoryConfig) -> Result<()> {
    cfg.validate()?;
    nn::add_embedding(reg, rng, "memory.slot_pos", cfg.history, cfg.d_model)?;
    nn::add_embedding(reg, rng, "memory.pad", 1, cfg.d_model)?;
    for l in 0..cfg.layers {
        nn::add_block(reg, rng, &format!("memory.layer{l}"), cfg.d_model, cfg.ff)?;
    }
    nn::add_layer_norm(reg, "memory.ln_f", cfg.d_model)?;
    Ok(())
}

/// The last `T` moment outputs of one episode, oldest first, spaced by the
/// chunk length.
#[derive(Clone, Debug)]
pub struct MemoryBuffer<F: Real = f32> {
    capacity: usize,
    stride: usize,
    entries: VecDeque<(usize, Tensor<F>)>,
}

impl<F: Real> MemoryBuffer<F> {
    pub fn new(capacity: usize, stride: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            stride,
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, m_prime: Tensor<F>, timestep: usize) -> Result<()> {
        if let Some(&(last, _)) = self.entries.back() {
            if timestep != last + self.stride {
                return Err(Error::Contract(format!(
                    "timestep {timestep} after {last} with stride {}",
                    self.stride
                )));
            }
        }
        if let Some((_, first)) = self.entries.front() {
            if first.shape() != m_prime.shape() {
                return Err(Error::Contract("moment output shape changed".into()));
            }
        }
        self.entries.push_back((timestep, m_prime));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn entries(&self) -> Vec<&Tensor<F>> {
        self.entries.iter().map(|e| &e.1).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Pad flags of a window holding `real` of `history` entries, left-padded.
pub fn pad_mask(history: usize, n_moment: usize, real: usize) -> Vec<bool> {
    let pads = history.saturating_sub(real) * n_moment;
    (0..history * n_moment).map(|r| r < pads).collect()
}

/// Gathers windows of pool entries (each `n_m` consecutive rows, oldest
/// first) into `[batch*L × d]`, left-padding short windows with zero rows.
/// Returns the rows and their pad flags.
pub fn window_rows<F: Real>(
    g: &mut Graph<F>,
    pool: Var,
    n_moment: usize,
    history: usize,
    windows: &[Vec<usize>],
) -> Result<(Var, Vec<bool>)> {
    let pv = g.value(pool);
    let (rows, d) = (pv.rows(), pv.cols());
    if rows % n_moment != 0 {
        return Err(Error::Contract(format!("pool of {rows} rows for {n_moment} moment tokens")));
    }
    let zero_row = rows;
    let mut idx = Vec::with_capacity(windows.len() * history * n_moment);
    let mut pad = Vec::with_capacity(windows.len() * history * n_moment);
    for w in windows {
        if w.is_empty() || w.len() > history {
            return Err(Error::Contract(format!("window of {} entries for history {history}", w.len())));
        }
        let pads = (history - w.len()) * n_moment;
        idx.extend(std::iter::repeat_n(zero_row, pads));
        pad.extend(std::iter::repeat_n(true, pads));
        for &e in w {
            if (e + 1) * n_moment > rows {
                return Err(Error::Contract(format!("entry {e} outside the pool")));
            }
            idx.extend(e * n_moment..(e + 1) * n_moment);
            pad.extend(std::iter::repeat_n(false, n_moment));
        }
    }
    let zero = g.constant(Tensor::zeros(&[1, d]));
    let table = g.concat_rows(&[pool, zero])?;
    Ok((g.embedding_gather(table, &idx)?, pad))
}

/// Puts the PAD embedding on padded rows and adds slot position embeddings.
pub fn embed_stack<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, cfg: &MemoryConfig, rows: Var, pad: &[bool]) -> Result<Var> {
    let (l, n, d) = (cfg.rows(), cfg.n_moment, cfg.d_model);
    if pad.len() != g.value(rows).rows() || pad.len() % l != 0 {
        return Err(Error::Contract(format!("{} pad flags for {} rows", pad.len(), g.value(rows).rows())));
    }
    let pad_param = nn::param(g, reg, "memory.pad")?;
    let zero = g.constant(Tensor::zeros(&[1, d]));
    let pad_table = g.concat_rows(&[pad_param, zero])?;
    let pad_idx: Vec<usize> = pad.iter().map(|&p| if p { 0 } else { 1 }).collect();
    let pads = g.embedding_gather(pad_table, &pad_idx)?;
    let x = g.add(rows, pads)?;
    let slots: Vec<usize> = (0..pad.len()).map(|r| (r % l) / n).collect();
    let pos = nn::param(g, reg, "memory.slot_pos")?;
    let pos = g.embedding_gather(pos, &slots)?;
    Ok(g.add(x, pos)?)
}

/// Stacks windows of moment outputs (oldest first, at most `T` each) into
/// `[batch*L × d]`: PAD embedding on the left for missing entries, slot
/// position embeddings on every row. Returns the stack and its pad flags.
pub fn stack_windows<F: Real>(
    g: &mut Graph<F>,
    reg: &ParamRegistry<F>,
    cfg: &MemoryConfig,
    windows: &[Vec<&Tensor<F>>],
) -> Result<(Var, Vec<bool>)> {
    let (n, d) = (cfg.n_moment, cfg.d_model);
    let mut data = Vec::new();
    let mut idx = Vec::with_capacity(windows.len());
    for w in windows {
        let mut ids = Vec::with_capacity(w.len());
        for m in w {
            if m.shape() != [n, d] {
                return Err(Error::Contract(format!("moment output {:?}, expected [{n}, {d}]", m.shape())));
            }
            ids.push(data.len() / (n * d));
            data.extend_from_slice(m.data());
        }
        idx.push(ids);
    }
    if data.is_empty() {
        return Err(Error::Contract("no moment outputs to stack".into()));
    }
    let rows = data.len() / d;
    let pool = g.constant(Tensor::new(vec![rows, d], data)?);
    let (x, pad) = window_rows(g, pool, n, cfg.history, &idx)?;
    Ok((embed_stack(g, reg, cfg, x, &pad)?, pad))
}

pub fn stack_history<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, cfg: &MemoryConfig, bufs: &[&MemoryBuffer<F>]) -> Result<(Var, Vec<bool>)> {
    let windows: Vec<Vec<&Tensor<F>>> = bufs.iter().map(|b| b.entries()).collect();
    if windows.iter().any(Vec::is_empty) {
        return Err(Error::Contract("cannot stack an empty memory buffer".into()));
    }
    stack_windows(g, reg, cfg, &windows)
}

pub struct Consolidated {
    /// History feature `[batch*n_m × d]`.
    pub feature: Var,
    /// Attention op per layer.
    pub attn: Vec<Var>,
}

/// Runs the memory transformer over `[batch*L × d]` stacks and returns the
/// last `n_m` rows of each. With `all_rows` the last layer also updates every
/// row (same feature, larger attention maps).
pub fn consolidate<F: Real>(
    g: &mut Graph<F>,
    reg: &ParamRegistry<F>,
    cfg: &MemoryConfig,
    stack: Var,
    pad: &[bool],
    all_rows: bool,
) -> Result<Consolidated> {
    let l = cfg.rows();
    let rows = g.value(stack).rows();
    if rows % l != 0 || pad.len() != rows || g.value(stack).cols() != cfg.d_model {
        return Err(Error::Contract(format!(
            "memory input {:?} with {} pad flags for L = {l}",
            g.value(stack).shape(),
            pad.len()
        )));
    }
    let batch = rows / l;
    let mut x = stack;
    let mut attn = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let queries = if i + 1 == cfg.layers && !all_rows { cfg.n_moment } else { l };
        let out = nn::block(
            g,
            reg,
            &format!("memory.layer{i}"),
            x,
            &BlockInput {
                batch,
                rows: l,
                queries,
                heads: cfg.heads,
                cache: None,
                key_pad: Some(pad),
            },
        )?;
        attn.push(out.attn);
        x = out.out;
    }
    if all_rows {
        x = g.embedding_gather(x, &nn::tail_rows(batch, l, cfg.n_moment))?;
    }
    let feature = nn::layer_norm(g, reg, "memory.ln_f", x)?;
    Ok(Consolidated { feature, attn })
}

/// Reshapes `[batch*n × d]` row blocks into `[batch × n·d]`, row-major.
pub fn flatten_rows<F: Real>(g: &mut Graph<F>, x: Var, n: usize) -> Result<Var> {
    let v = g.value(x);
    let (rows, d) = (v.rows(), v.cols());
    if n == 0 || rows % n != 0 {
        return Err(Error::Contract(format!("{rows} rows not divisible into blocks of {n}")));
    }
    Ok(g.reshape(x, &[rows / n, n * d])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, TaskId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(t: usize) -> MemoryConfig {
        MemoryConfig {
            d_model: 8,
            heads: 2,
            ff: 16,
            n_moment: 2,
            history: t,
            ..MemoryConfig::default()
        }
    }

    fn setup(c: &MemoryConfig) -> ParamRegistry<f64> {
        let mut reg = ParamRegistry::new();
        init_memory(&mut reg, &mut ChaCha8Rng::seed_from_u64(4), c).unwrap();
        reg.cast()
    }

    fn entry(seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[2, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn buffer_ring_semantics() {
        let mut b = MemoryBuffer::<f64>::new(3, 4);
        b.push(entry(0), 8).unwrap();
        assert!(b.push(entry(1), 13).is_err());
        for (i, t) in [12, 16, 20].into_iter().enumerate() {
            b.push(entry(i as u64 + 1), t).unwrap();
        }
        assert_eq!(b.timesteps(), vec![12, 16, 20]);
        assert!(b.entries()[0].bit_eq(&entry(1)));
    }

    #[test]
    fn stack_layout_and_padding() {
        let c = MemoryConfig {
            d_model: 8,
            heads: 2,
            n_moment: 4,
            history: 4,
            ..MemoryConfig::default()
        };
        let reg = setup(&c);
        let m = Tensor::<f64>::uniform(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let (x, pad) = stack_windows(&mut g, &reg, &c, &[vec![&m]]).unwrap();
        assert_eq!(g.value(x).shape(), &[16, 8]);
        assert_eq!(pad.iter().filter(|&&p| p).count(), 12);
        assert!(pad[..12].iter().all(|&p| p));
        let pos = reg.get("memory.slot_pos").unwrap();
        let want: Vec<f64> = m.row(0).iter().zip(pos.row(3)).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(x).row(12), want.as_slice());
        assert!(stack_history::<f64>(&mut g, &reg, &c, &[&MemoryBuffer::new(4, 4)]).is_err());
    }

    #[test]
    fn pruned_last_layer_matches_all_rows() {
        let c = cfg(4);
        let reg = setup(&c);
        let e: Vec<Tensor<f64>> = (0..6).map(entry).collect();
        let mut g = Graph::new();
        let (x, pad) = stack_windows(&mut g, &reg, &c, &[vec![&e[0], &e[1]], vec![&e[2], &e[3], &e[4], &e[5]]]).unwrap();
        let a = consolidate(&mut g, &reg, &c, x, &pad, false).unwrap();
        let b = consolidate(&mut g, &reg, &c, x, &pad, true).unwrap();
        assert!(g.value(a.feature).bit_eq(g.value(b.feature)));
        assert_eq!(g.value(a.feature).shape(), &[4, 8]);
    }

    #[test]
    fn tcl_symmetric_point_is_ln2() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let l = tcl_loss(&mut g, z, z, z, 0.1).unwrap();
        assert_eq!(g.value(l).item(), std::f64::consts::LN_2);
        let neg = g.scale(z, -1.0).unwrap();
        let l = tcl_loss(&mut g, z, z, neg, 0.1).unwrap();
        assert!((g.value(l).item() - (-20f64).exp().ln_1p()).abs() < 1e-15);
        assert!(g.value(l).item() < 1e-8);
        assert!(tcl_loss(&mut g, z, z, z, 0.0).is_err());
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        assert!(tcl_loss(&mut g, z, zero, z, 0.1).is_err());
    }

    #[test]
    fn augmentation_never_identity_and_reproducible() {
        let (_, obs, _, _) = reset(TaskId::SwapCubes, 3);
        let off = AugmentConfig {
            p_occlusion: 0.0,
            p_noise: 0.0,
            p_jitter: 0.0,
            ..AugmentConfig::default()
        };
        let v = augment_observation(&obs, &mut ChaCha8Rng::seed_from_u64(0), &off);
        assert!(v.obs != obs || v.jitter.is_some());
        for seed in 0..50 {
            let a = augment_observation(&obs, &mut ChaCha8Rng::seed_from_u64(seed), &AugmentConfig::default());
            let b = augment_observation(&obs, &mut ChaCha8Rng::seed_from_u64(seed), &AugmentConfig::default());
            assert_eq!(a, b);
            assert!(a.obs != obs || a.jitter.is_some());
        }
    }
}
