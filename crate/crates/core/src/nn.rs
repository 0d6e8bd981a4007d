//! Parameter initialisation and the pre-norm transformer block shared by the
//! backbone and the memory module.

use rand::Rng;

use crate::tensor::{AttnSpec, Graph, ParamRegistry, Real, Result, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Matrices `U(±1/√fan_in)`, zero bias.
pub fn add_linear<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    reg.add(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], scale, rng), false)?;
    reg.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false)?;
    Ok(())
}

pub fn add_layer_norm(reg: &mut ParamRegistry, name: &str, d: usize) -> Result<()> {
    reg.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), false)?;
    reg.add(format!("{name}.bias"), Tensor::zeros(&[d]), false)?;
    Ok(())
}

/// Embedding tables `U(-1, 1)`.
pub fn add_embedding<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, name: &str, rows: usize, d: usize) -> Result<()> {
    reg.add(name, Tensor::uniform(&[rows, d], 1.0, rng), false)?;
    Ok(())
}

pub fn add_block<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, prefix: &str, d: usize, ff: usize) -> Result<()> {
    add_layer_norm(reg, &format!("{prefix}.ln1"), d)?;
    for p in ["q", "k", "v", "o"] {
        add_linear(reg, rng, &format!("{prefix}.attn.{p}"), d, d)?;
    }
    add_layer_norm(reg, &format!("{prefix}.ln2"), d)?;
    add_linear(reg, rng, &format!("{prefix}.ff1"), d, ff)?;
    add_linear(reg, rng, &format!("{prefix}.ff2"), ff, d)?;
    Ok(())
}

pub fn param<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, name: &str) -> Result<Var> {
    Ok(g.param(reg, reg.id(name)?))
}

pub fn linear<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, name: &str, x: Var) -> Result<Var> {
    let w = param(g, reg, &format!("{name}.w"))?;
    let b = param(g, reg, &format!("{name}.b"))?;
    g.linear(x, w, b)
}

pub fn layer_norm<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, name: &str, x: Var) -> Result<Var> {
    let gain = param(g, reg, &format!("{name}.gain"))?;
    let bias = param(g, reg, &format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Keys and values of rows already processed by a block, one row block per
/// batch element.
#[derive(Clone, Copy, Debug)]
pub struct KvCache {
    pub k: Var,
    pub v: Var,
    pub rows: usize,
}

pub struct BlockOut {
    pub out: Var,
    pub k: Var,
    pub v: Var,
    pub attn: Var,
}

pub struct BlockInput<'a> {
    pub batch: usize,
    /// Rows per batch element in `x`.
    pub rows: usize,
    /// Only the last `queries` rows of each element are updated.
    pub queries: usize,
    pub heads: usize,
    pub cache: Option<KvCache>,
    pub key_pad: Option<&'a [bool]>,
}

/// Row indices of the last `q` of every `n` rows, batch-major.
pub fn tail_rows(batch: usize, n: usize, q: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| (n - q..n).map(move |i| b * n + i)).collect()
}

/// One pre-norm causal block. Keys cover cached rows followed by all rows of
/// `x`; queries are the last `queries` rows of each batch element, so a
/// partial update yields exactly the rows a full pass would.
pub fn block<F: Real>(g: &mut Graph<F>, reg: &ParamRegistry<F>, prefix: &str, x: Var, inp: &BlockInput) -> Result<BlockOut> {
    let h = layer_norm(g, reg, &format!("{prefix}.ln1"), x)?;
    let k_new = linear(g, reg, &format!("{prefix}.attn.k"), h)?;
    let v_new = linear(g, reg, &format!("{prefix}.attn.v"), h)?;
    let (k, v, cached) = match inp.cache {
        Some(c) => (
            g.concat_rows_grouped(&[c.k, k_new], inp.batch)?,
            g.concat_rows_grouped(&[c.v, v_new], inp.batch)?,
            c.rows,
        ),
        None => (k_new, v_new, 0),
    };
    let (hq, xq) = if inp.queries < inp.rows {
        let idx = tail_rows(inp.batch, inp.rows, inp.queries);
        (g.embedding_gather(h, &idx)?, g.embedding_gather(x, &idx)?)
    } else {
        (h, x)
    };
    let q = linear(g, reg, &format!("{prefix}.attn.q"), hq)?;
    let spec = AttnSpec {
        batch: inp.batch,
        heads: inp.heads,
        q_len: inp.queries,
        k_len: cached + inp.rows,
        causal: true,
        key_pad: inp.key_pad.map(<[bool]>::to_vec),
    };
    let attn = g.attention(q, k, v, spec)?;
    let o = linear(g, reg, &format!("{prefix}.attn.o"), attn)?;
    let y = g.add(xq, o)?;
    let h2 = layer_norm(g, reg, &format!("{prefix}.ln2"), y)?;
    let f = linear(g, reg, &format!("{prefix}.ff1"), h2)?;
    let f = g.gelu(f)?;
    let f = linear(g, reg, &format!("{prefix}.ff2"), f)?;
    let out = g.add(y, f)?;
    Ok(BlockOut {
        out,
        k: k_new,
        v: v_new,
        attn,
    })
}

/// Multiply-accumulates of one block: `rows` new rows per element, `queries`
/// of them updated, attending over `cached + rows` keys.
pub fn block_macs(d: usize, ff: usize, cached: usize, rows: usize, queries: usize) -> u64 {
    let (d, ff, cached, rows, queries) = (d as u64, ff as u64, cached as u64, rows as u64, queries as u64);
    let kv = 2 * rows * d * d;
    let qo = 2 * queries * d * d;
    // query i sees cached + (rows - queries) + i + 1 keys, for scores and values
    let keys: u64 = (0..queries).map(|i| cached + rows - queries + i + 1).sum();
    let attn = 2 * keys * d;
    let mlp = 2 * queries * d * ff;
    kv + qo + attn + mlp
}
