use hamletbench::backbone::{self, BackboneConfig};
use hamletbench::env::{reset, TaskId};
use hamletbench::memory::{self, MemoryConfig};
use hamletbench::nn::{self, BlockInput};
use hamletbench::tensor::{Graph, ParamRegistry, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs `layers` blocks over `x` and returns every output row.
fn run_blocks(reg: &ParamRegistry, prefix: &str, layers: usize, x: &Tensor<f32>, batch: usize, heads: usize, pad: Option<&[bool]>) -> Tensor<f32> {
    let rows = x.rows() / batch;
    let mut g = Graph::new();
    let mut h = g.constant(x.clone());
    for l in 0..layers {
        let inp = BlockInput { batch, rows, queries: rows, heads, cache: None, key_pad: pad };
        h = nn::block(&mut g, reg, &format!("{prefix}{l}"), h, &inp).unwrap().out;
    }
    g.value(h).clone()
}

fn row_eq(a: &Tensor<f32>, b: &Tensor<f32>, r: usize) -> bool {
    a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Checks that no attention probability lands on a key after its query
/// (or on a padded key other than the query's own slot).
fn assert_masked(g: &Graph<f32>, attn: &[Var]) {
    for &a in attn {
        let (spec, probs) = g.attention_probs(a).unwrap();
        let off = spec.k_len - spec.q_len;
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                for i in 0..spec.q_len {
                    let row = &probs[((b * spec.heads + h) * spec.q_len + i) * spec.k_len..][..spec.k_len];
                    for (j, &p) in row.iter().enumerate() {
                        let future = spec.causal && j > off + i;
                        let padded = spec.key_pad.as_ref().is_some_and(|m| m[b * spec.k_len + j]) && j != off + i;
                        if future || padded {
                            assert_eq!(p, 0.0, "query {i} sees key {j}");
                        }
                    }
                    let total: f32 = row.iter().sum();
                    assert!((total - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}

pub fn backbone_rows_ignore_later_tokens() {
    let cfg = BackboneConfig { d_model: 16, heads: 2, layers: 2, ff: 32, ..BackboneConfig::default() };
    let mut reg = ParamRegistry::new();
    backbone::init_params(&mut reg, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
    let (batch, rows) = (2, 12);
    let x = rand_t(&[batch * rows, cfg.d_model], 2);
    let base = run_blocks(&reg, "backbone.layer", cfg.layers, &x, batch, cfg.heads, None);
    for j in [0, 5, rows - 1] {
        let mut y = x.clone();
        for v in y.data_mut()[j * cfg.d_model..(j + 1) * cfg.d_model].iter_mut() {
            *v += 3.0;
        }
        let out = run_blocks(&reg, "backbone.layer", cfg.layers, &y, batch, cfg.heads, None);
        for r in 0..batch * rows {
            let same = r < j || r >= rows;
            assert_eq!(row_eq(&base, &out, r), same, "perturbing row {j}, row {r}");
        }
    }
}

pub fn backbone_attention_is_causal_on_real_sequences() {
    let cfg = BackboneConfig { d_model: 16, heads: 2, layers: 2, ff: 32, ..BackboneConfig::default() };
    let mut reg = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    backbone::init_params(&mut reg, &mut rng, &cfg).unwrap();
    memory::init_moment_tokens(&mut reg, &mut rng, 4, cfg.d_model).unwrap();
    let seqs: Vec<_> = TaskId::ALL
        .iter()
        .map(|&t| {
            let (_, obs, proprio, instr) = reset(t, 7);
            backbone::tokenize(&cfg, &obs, &proprio, &instr, 4, &[]).unwrap()
        })
        .collect();
    // Instructions differ in length across tasks; encode each on its own.
    for seq in seqs {
        let mut g = Graph::new();
        let m = nn::param(&mut g, &reg, memory::MOMENT_TOKENS).unwrap();
        let enc = backbone::encode(&mut g, &reg, &cfg, std::slice::from_ref(&seq), Some(m)).unwrap();
        assert_eq!(enc.attn.len(), cfg.layers);
        assert_masked(&g, &enc.attn);
    }
}

fn memory_cfg(history: usize) -> MemoryConfig {
    MemoryConfig { d_model: 16, heads: 2, layers: 2, ff: 32, n_moment: 2, history }
}

fn memory_reg(cfg: &MemoryConfig) -> ParamRegistry {
    let mut reg = ParamRegistry::new();
    memory::init_memory(&mut reg, &mut ChaCha8Rng::seed_from_u64(9), cfg).unwrap();
    reg
}

fn consolidate(reg: &ParamRegistry, cfg: &MemoryConfig, stack: &Tensor<f32>, pad: &[bool]) -> (Tensor<f32>, Graph<f32>, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.constant(stack.clone());
    let out = memory::consolidate(&mut g, reg, cfg, x, pad, true).unwrap();
    (g.value(out.feature).clone(), g, out.attn)
}

pub fn memory_rows_ignore_later_slots() {
    for t in [1, 2, 4, 8] {
        let cfg = memory_cfg(t);
        let reg = memory_reg(&cfg);
        let l = cfg.rows();
        let x = rand_t(&[l, cfg.d_model], 10 + t as u64);
        let base = run_blocks(&reg, "memory.layer", cfg.layers, &x, 1, cfg.heads, None);
        for j in 0..l {
            let mut y = x.clone();
            y.data_mut()[j * cfg.d_model] -= 2.0;
            let out = run_blocks(&reg, "memory.layer", cfg.layers, &y, 1, cfg.heads, None);
            for r in 0..l {
                assert_eq!(row_eq(&base, &out, r), r < j, "T={t}: perturbing slot row {j}, row {r}");
            }
        }
    }
}

pub fn padded_slots_never_reach_the_feature() {
    for t in [1, 2, 4, 8] {
        let cfg = memory_cfg(t);
        let reg = memory_reg(&cfg);
        let entries: Vec<Tensor<f32>> = (0..t).map(|i| rand_t(&[cfg.n_moment, cfg.d_model], 40 + i as u64)).collect();
        for real in 1..=t {
            let window: Vec<&Tensor<f32>> = entries[t - real..].iter().collect();
            let mut g = Graph::new();
            let (stack, pad) = memory::stack_windows(&mut g, &reg, &cfg, &[window]).unwrap();
            assert_eq!(pad, memory::pad_mask(t, cfg.n_moment, real));
            let stack = g.value(stack).clone();

            let (feature, g, attn) = consolidate(&reg, &cfg, &stack, &pad);
            assert_eq!(feature.shape(), [cfg.n_moment, cfg.d_model]);
            assert_masked(&g, &attn);

            let mut junk = stack.clone();
            for (r, _) in pad.iter().enumerate().filter(|(_, p)| **p) {
                for v in junk.data_mut()[r * cfg.d_model..(r + 1) * cfg.d_model].iter_mut() {
                    *v = 100.0 - *v;
                }
            }
            let (other, _, _) = consolidate(&reg, &cfg, &junk, &pad);
            assert!(feature.bit_eq(&other), "T={t}, {real} real entries: padded content leaked");
        }
    }
}

pub fn feature_depends_only_on_the_window() {
    // Buffers that agree on the last T entries give the same feature no
    // matter what came before or how many entries were pushed.
    for t in [1, 2, 4, 8] {
        let cfg = memory_cfg(t);
        let reg = memory_reg(&cfg);
        let mut short = memory::MemoryBuffer::new(t, 4);
        let mut long = memory::MemoryBuffer::new(t, 4);
        for i in 0..3 * t {
            long.push(rand_t(&[cfg.n_moment, cfg.d_model], 100 + i as u64), i * 4).unwrap();
        }
        for i in 2 * t..3 * t {
            short.push(rand_t(&[cfg.n_moment, cfg.d_model], 100 + i as u64), i * 4).unwrap();
        }
        let feature = |buf: &memory::MemoryBuffer<f32>| {
            let mut g = Graph::new();
            let (stack, pad) = memory::stack_history(&mut g, &reg, &cfg, &[buf]).unwrap();
            let out = memory::consolidate(&mut g, &reg, &cfg, stack, &pad, false).unwrap();
            g.value(out.feature).clone()
        };
        assert!(feature(&short).bit_eq(&feature(&long)), "T={t}");
    }
}
