//! The causal transformer backbone over `[instruction; observation; readout;
//! moment]` tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{instr, CellToken, Instruction, Observation, ProprioState, GRID, NUM_CELLS};
use crate::error::{Error, Result};
use crate::nn::{self, BlockInput, KvCache};
use crate::tensor::{Graph, ParamRegistry, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub cell_vocab: usize,
    pub instr_vocab: usize,
    pub max_instr: usize,
    /// Observation frames per sequence; above 1 adds frame-index embeddings.
    pub frames: usize,
    pub max_seq_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 4,
            ff: 256,
            cell_vocab: CellToken::COUNT,
            instr_vocab: instr::VOCAB,
            max_instr: instr::MAX_LEN,
            frames: 1,
            max_seq_len: 512,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ff == 0 || self.frames == 0 {
            return Err(Error::config("layers, ff and frames must be positive"));
        }
        if self.cell_vocab < CellToken::COUNT || self.instr_vocab < instr::VOCAB {
            return Err(Error::config("vocabulary smaller than the environment's"));
        }
        Ok(())
    }

    /// Length of a sequence with `frames` observation frames and `n_moment`
    /// moment slots.
    pub fn seq_len(&self, instr_len: usize, frames: usize, n_moment: usize) -> usize {
        instr_len + frames * NUM_CELLS + 1 + n_moment
    }

    /// Checks that the longest sequence this config will be asked to encode fits.
    pub fn check_len(&self, n_moment: usize) -> Result<()> {
        let len = self.seq_len(self.max_instr, self.frames, n_moment);
        if len > self.max_seq_len {
            return Err(Error::config(format!(
                "sequence of {len} tokens exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Segment {
    Instruction,
    Observation,
    Readout,
    Moment,
}

/// One observation frame as the backbone sees it: cell tokens plus the
/// gripper cell, whose embedding gets a holding-dependent overlay.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub cells: [u8; NUM_CELLS],
    pub gripper: (usize, usize),
    pub holding: bool,
}

impl Frame {
    pub fn new(obs: &Observation, proprio: &ProprioState) -> Self {
        let (x, y, holding) = proprio.cell();
        Self {
            cells: obs.cells,
            gripper: (x.min(GRID - 1), y.min(GRID - 1)),
            holding,
        }
    }

    fn gripper_cell(&self) -> usize {
        self.gripper.1 * GRID + self.gripper.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub instruction: Vec<u8>,
    /// Oldest first; the last frame is the current one.
    pub frames: Vec<Frame>,
    pub n_moment: usize,
    /// Seed for Gaussian noise on the cell embeddings (augmented views only).
    pub jitter: Option<u64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.prefix_len() + self.n_moment
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens up to and including READOUT.
    pub fn prefix_len(&self) -> usize {
        self.instruction.len() + self.frames.len() * NUM_CELLS + 1
    }

    pub fn readout_index(&self) -> usize {
        self.prefix_len() - 1
    }

    pub fn observation_span(&self) -> std::ops::Range<usize> {
        let start = self.instruction.len();
        start..start + self.frames.len() * NUM_CELLS
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut s = vec![Segment::Instruction; self.instruction.len()];
        s.extend(std::iter::repeat_n(Segment::Observation, self.frames.len() * NUM_CELLS));
        s.push(Segment::Readout);
        s.extend(std::iter::repeat_n(Segment::Moment, self.n_moment));
        s
    }

    /// Token ids within their segment's vocabulary (moment slots are numbered).
    pub fn token_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.instruction.iter().map(|&t| t as usize).collect();
        for f in &self.frames {
            ids.extend(f.cells.iter().map(|&c| c as usize));
        }
        ids.push(0);
        ids.extend(0..self.n_moment);
        ids
    }
}

/// Builds the token sequence for one timestep. `history` holds earlier frames
/// oldest first and is only used by the multi-frame baseline.
pub fn tokenize(
    cfg: &BackboneConfig,
    obs: &Observation,
    proprio: &ProprioState,
    instruction: &Instruction,
    n_moment: usize,
    history: &[Frame],
) -> Result<TokenSequence> {
    if instruction.0.is_empty() || instruction.0.len() > cfg.max_instr {
        return Err(Error::config(format!("instruction of length {}", instruction.0.len())));
    }
    if let Some(&t) = instruction.0.iter().find(|&&t| t as usize >= cfg.instr_vocab) {
        return Err(Error::config(format!("instruction token {t} outside the vocabulary")));
    }
    if obs.cells.iter().any(|&c| c as usize >= cfg.cell_vocab) {
        return Err(Error::config("cell token outside the vocabulary"));
    }
    if history.len() + 1 != cfg.frames {
        return Err(Error::config(format!(
            "{} history frames for a {}-frame backbone",
            history.len(),
            cfg.frames
        )));
    }
    let mut frames = history.to_vec();
    frames.push(Frame::new(obs, proprio));
    let seq = TokenSequence {
        instruction: instruction.0.clone(),
        frames,
        n_moment,
        jitter: None,
    };
    if seq.len() > cfg.max_seq_len {
        return Err(Error::config(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            seq.len(),
            cfg.max_seq_len
        )));
    }
    Ok(seq)
}

pub const PREFIX: &str = "backbone.";

pub fn init_params<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, cfg: &BackboneConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    nn::add_embedding(reg, rng, "backbone.instr_embed", cfg.instr_vocab, d)?;
    nn::add_embedding(reg, rng, "backbone.instr_pos", cfg.max_instr, d)?;
    nn::add_embedding(reg, rng, "backbone.cell_embed", cfg.cell_vocab, d)?;
    nn::add_embedding(reg, rng, "backbone.row_embed", GRID, d)?;
    nn::add_embedding(reg, rng, "backbone.col_embed", GRID, d)?;
    nn::add_embedding(reg, rng, "backbone.gripper_embed", 2, d)?;
    nn::add_embedding(reg, rng, "backbone.readout", 1, d)?;
    for l in 0..cfg.layers {
        nn::add_block(reg, rng, &format!("backbone.layer{l}"), d, cfg.ff)?;
    }
    nn::add_layer_norm(reg, "backbone.ln_f", d)?;
    if cfg.frames > 1 {
        add_frame_embeddings(reg, rng, cfg)?;
    }
    Ok(())
}

/// Fresh frame-index embeddings for a multi-frame backbone.
pub fn add_frame_embeddings<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, cfg: &BackboneConfig) -> Result<()> {
    Ok(nn::add_embedding(reg, rng, "backbone.frame_embed", cfg.frames, cfg.d_model)?)
}

fn table_with_zero<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, names: &[&str], d: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(names.len() + 1);
    for n in names {
        parts.push(nn::param(g, reg, n)?);
    }
    parts.push(g.constant(Tensor::zeros(&[1, d])));
    Ok(g.concat_rows(&parts)?)
}

fn jitter_noise<F: Real>(seed: u64, n: usize, d: usize) -> Vec<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02 * (d as f64).sqrt()).expect("positive sigma");
    (0..n * d).map(|_| F::of(normal.sample(&mut rng))).collect()
}

fn check_batch(cfg: &BackboneConfig, seqs: &[TokenSequence]) -> Result<usize> {
    let first = seqs.first().ok_or_else(|| Error::config("empty batch"))?;
    let len = first.prefix_len();
    for s in seqs {
        if s.prefix_len() != len || s.n_moment != first.n_moment {
            return Err(Error::config("sequences in a batch must share one layout"));
        }
        if s.frames.len() != cfg.frames {
            return Err(Error::config(format!(
                "{} frames for a {}-frame backbone",
                s.frames.len(),
                cfg.frames
            )));
        }
        if s.len() > cfg.max_seq_len {
            return Err(Error::config(format!("sequence of {} tokens exceeds max_seq_len", s.len())));
        }
    }
    Ok(len)
}

/// Prefix embeddings `[batch*prefix_len × d]` (instruction, cells, readout).
pub fn embed<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, cfg: &BackboneConfig, seqs: &[TokenSequence]) -> Result<Var> {
    let len = check_batch(cfg, seqs)?;
    let d = cfg.d_model;
    let (iv, cv) = (cfg.instr_vocab, cfg.cell_vocab);
    let multi = cfg.frames > 1;
    let content = table_with_zero(g, reg, &["backbone.instr_embed", "backbone.cell_embed", "backbone.readout"], d)?;
    let pos = table_with_zero(g, reg, &["backbone.instr_pos", "backbone.row_embed"], d)?;
    let col = table_with_zero(g, reg, &["backbone.col_embed"], d)?;
    let grip = table_with_zero(g, reg, &["backbone.gripper_embed"], d)?;
    let frame = if multi {
        Some(table_with_zero(g, reg, &["backbone.frame_embed"], d)?)
    } else {
        None
    };
    let n = seqs.len() * len;
    let (mut ci, mut pi, mut coi, mut gi, mut fi) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let (pos_zero, col_zero, grip_zero, frame_zero) = (cfg.max_instr + GRID, GRID, 2, cfg.frames);
    let mut noise = vec![F::zero(); if seqs.iter().any(|s| s.jitter.is_some()) { n * d } else { 0 }];
    for (b, s) in seqs.iter().enumerate() {
        for (i, &t) in s.instruction.iter().enumerate() {
            ci.push(t as usize);
            pi.push(i);
            coi.push(col_zero);
            gi.push(grip_zero);
            fi.push(frame_zero);
        }
        for (f, fr) in s.frames.iter().enumerate() {
            let gc = fr.gripper_cell();
            for (c, &tok) in fr.cells.iter().enumerate() {
                ci.push(iv + tok as usize);
                pi.push(cfg.max_instr + c / GRID);
                coi.push(c % GRID);
                gi.push(if c == gc { fr.holding as usize } else { grip_zero });
                fi.push(f);
            }
        }
        ci.push(iv + cv);
        pi.push(pos_zero);
        coi.push(col_zero);
        gi.push(grip_zero);
        fi.push(frame_zero);
        if let Some(seed) = s.jitter {
            let span = s.observation_span();
            let z = jitter_noise::<F>(seed, span.len(), d);
            let start = (b * len + span.start) * d;
            noise[start..start + z.len()].copy_from_slice(&z);
        }
    }
    let mut x = g.embedding_gather(content, &ci)?;
    for (table, idx) in [(pos, &pi), (col, &coi), (grip, &gi)] {
        let e = g.embedding_gather(table, idx)?;
        x = g.add(x, e)?;
    }
    if let Some(frame) = frame {
        let e = g.embedding_gather(frame, &fi)?;
        x = g.add(x, e)?;
    }
    if !noise.is_empty() {
        let c = g.constant(Tensor::new(vec![n, d], noise)?);
        x = g.add(x, c)?;
    }
    Ok(x)
}

fn repeat_moments<F: Real>(g: &mut Graph<F>, moment: Var, n_m: usize, batch: usize) -> Result<Var> {
    let rows = g.value(moment).rows();
    if rows != n_m {
        return Err(Error::Contract(format!("{rows} moment embeddings for {n_m} moment slots")));
    }
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..n_m).collect();
    Ok(g.embedding_gather(moment, &idx)?)
}

pub struct Encoded {
    /// READOUT states `[batch × d]`.
    pub h: Var,
    /// Moment outputs `[batch*n_m × d]`.
    pub moments: Option<Var>,
    /// Attention op of every layer.
    pub attn: Vec<Var>,
}

/// Full forward pass over the whole sequence. `moment` is `[n_m × d]` and
/// required iff the sequences carry moment slots.
pub fn encode<F: Real>(
    g: &mut Graph<F>,
    reg: &ParamRegistry<F>,
    cfg: &BackboneConfig,
    seqs: &[TokenSequence],
    moment: Option<Var>,
) -> Result<Encoded> {
    let prefix = embed(g, reg, cfg, seqs)?;
    let batch = seqs.len();
    let n_m = seqs[0].n_moment;
    let p = seqs[0].prefix_len();
    let mut x = match (moment, n_m) {
        (None, 0) => prefix,
        (Some(m), n) if n > 0 => {
            let rep = repeat_moments(g, m, n, batch)?;
            g.concat_rows_grouped(&[prefix, rep], batch)?
        }
        _ => return Err(Error::Contract("moment embeddings must be given iff the sequence has moment slots".into())),
    };
    let rows = p + n_m;
    let mut attn = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let out = nn::block(
            g,
            reg,
            &format!("backbone.layer{l}"),
            x,
            &BlockInput {
                batch,
                rows,
                queries: rows,
                heads: cfg.heads,
                cache: None,
                key_pad: None,
            },
        )?;
        attn.push(out.attn);
        x = out.out;
    }
    let readout: Vec<usize> = (0..batch).map(|b| b * rows + p - 1).collect();
    let h = g.embedding_gather(x, &readout)?;
    let h = nn::layer_norm(g, reg, "backbone.ln_f", h)?;
    let moments = if n_m > 0 {
        let m = g.embedding_gather(x, &nn::tail_rows(batch, rows, n_m))?;
        Some(nn::layer_norm(g, reg, "backbone.ln_f", m)?)
    } else {
        None
    };
    Ok(Encoded { h, moments, attn })
}

/// Per-layer keys and values of the prefix, plus the READOUT state. Moment
/// tokens can then be encoded against it without redoing the prefix.
#[derive(Clone, Debug)]
pub struct PrefixState<F: Real> {
    pub batch: usize,
    pub rows: usize,
    pub k: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub h: Tensor<F>,
}

/// Forward pass over the prefix only, without gradient tracking.
pub fn encode_prefix<F: Real>(reg: &ParamRegistry<F>, cfg: &BackboneConfig, seqs: &[TokenSequence]) -> Result<PrefixState<F>> {
    let mut g = Graph::new();
    let mut plain: Vec<TokenSequence> = seqs.to_vec();
    for s in &mut plain {
        s.n_moment = 0;
    }
    encode_collect(&mut g, reg, cfg, &plain)
}

fn encode_collect<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, cfg: &BackboneConfig, seqs: &[TokenSequence]) -> Result<PrefixState<F>> {
    let mut x = embed(g, reg, cfg, seqs)?;
    let batch = seqs.len();
    let rows = seqs[0].prefix_len();
    let (mut ks, mut vs) = (Vec::with_capacity(cfg.layers), Vec::with_capacity(cfg.layers));
    for l in 0..cfg.layers {
        let out = nn::block(
            g,
            reg,
            &format!("backbone.layer{l}"),
            x,
            &BlockInput {
                batch,
                rows,
                queries: rows,
                heads: cfg.heads,
                cache: None,
                key_pad: None,
            },
        )?;
        ks.push(g.value(out.k).clone());
        vs.push(g.value(out.v).clone());
        x = out.out;
    }
    let readout: Vec<usize> = (0..batch).map(|b| b * rows + rows - 1).collect();
    let h = g.embedding_gather(x, &readout)?;
    let h = nn::layer_norm(g, reg, "backbone.ln_f", h)?;
    Ok(PrefixState {
        batch,
        rows,
        k: ks,
        v: vs,
        h: g.value(h).clone(),
    })
}

impl<F: Real> PrefixState<F> {
    /// Keeps the batch elements listed in `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |t: &Tensor<F>, rows: usize| {
            let d = t.cols();
            let mut data = Vec::with_capacity(idx.len() * rows * d);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * rows * d..(i + 1) * rows * d]);
            }
            Tensor::new(vec![idx.len() * rows, d], data).expect("consistent shape")
        };
        Self {
            batch: idx.len(),
            rows: self.rows,
            k: self.k.iter().map(|t| pick(t, self.rows)).collect(),
            v: self.v.iter().map(|t| pick(t, self.rows)).collect(),
            h: pick(&self.h, 1),
        }
    }

    /// Concatenates batches sharing one prefix layout.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::config("nothing to concatenate"))?;
        if parts.iter().any(|p| p.rows != first.rows || p.k.len() != first.k.len()) {
            return Err(Error::config("prefix layouts differ"));
        }
        let cat = |get: &dyn Fn(&Self) -> &Tensor<F>| {
            let d = get(first).cols();
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(get(p).data());
            }
            let rows = data.len() / d;
            Tensor::new(vec![rows, d], data).expect("consistent shape")
        };
        Ok(Self {
            batch: parts.iter().map(|p| p.batch).sum(),
            rows: first.rows,
            k: (0..first.k.len()).map(|l| cat(&|p: &Self| &p.k[l])).collect(),
            v: (0..first.v.len()).map(|l| cat(&|p: &Self| &p.v[l])).collect(),
            h: cat(&|p: &Self| &p.h),
        })
    }
}

/// Moment outputs `[batch*n_m × d]` computed against a cached prefix. Equal
/// bit for bit to the moment rows of [`encode`].
pub fn encode_moments<F: Real>(
    g: &mut Graph<F>,
    reg: &ParamRegistry<F>,
    cfg: &BackboneConfig,
    prefix: &PrefixState<F>,
    moment: Var,
) -> Result<(Var, Vec<Var>)> {
    let n_m = g.value(moment).rows();
    if prefix.k.len() != cfg.layers {
        return Err(Error::Contract("prefix cache does not match the layer count".into()));
    }
    let mut x = repeat_moments(g, moment, n_m, prefix.batch)?;
    let mut attn = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let ck = g.constant(prefix.k[l].clone());
        let cv = g.constant(prefix.v[l].clone());
        let out = nn::block(
            g,
            reg,
            &format!("backbone.layer{l}"),
            x,
            &BlockInput {
                batch: prefix.batch,
                rows: n_m,
                queries: n_m,
                heads: cfg.heads,
                cache: Some(KvCache {
                    k: ck,
                    v: cv,
                    rows: prefix.rows,
                }),
                key_pad: None,
            },
        )?;
        attn.push(out.attn);
        x = out.out;
    }
    let m = nn::layer_norm(g, reg, "backbone.ln_f", x)?;
    Ok((m, attn))
}

/// Exact multiply-accumulate count of one backbone forward on a sequence of
/// `len` tokens (embedding lookups are free).
pub fn forward_macs(cfg: &BackboneConfig, len: usize) -> u64 {
    cfg.layers as u64 * nn::block_macs(cfg.d_model, cfg.ff, 0, len, len)
}

/// Largest set of activations alive at once in one forward pass: the
/// residual stream plus one layer's intermediates (normed input, q, k, v,
/// attention output, the hidden MLP activation and the per-head score matrix).
pub fn peak_activation_scalars(cfg: &BackboneConfig, len: usize) -> u64 {
    let (d, ff, h, n) = (cfg.d_model as u64, cfg.ff as u64, cfg.heads as u64, len as u64);
    let attn_phase = n * d * 6 + h * n * n;
    let mlp_phase = n * d * 3 + n * ff;
    attn_phase.max(mlp_phase)
}
