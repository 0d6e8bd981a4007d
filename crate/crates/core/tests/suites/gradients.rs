use std::cell::RefCell;
use std::collections::BTreeSet;

use hamletbench::nn::{self, BlockInput};
use hamletbench::tensor::{grad_check_graph, grad_check_params, AttnSpec, Graph, ParamRegistry, Result, Tensor, Var, KERNELS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

thread_local! {
    static SEEN: RefCell<BTreeSet<&'static str>> = const { RefCell::new(BTreeSet::new()) };
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Contracts `y` with fixed random weights so every output coordinate
/// contributes a distinct amount to the scalar.
fn readout(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_t(&shape, 0xfeed));
    let m = g.mul(y, w)?;
    g.sum(m)
}

fn check(name: &str, point: Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) {
    let scalar = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
        let y = build(g, x)?;
        if g.value(y).numel() == 1 {
            Ok(y)
        } else {
            readout(g, y)
        }
    };
    let report = grad_check_graph(scalar, &point, H, TOL).unwrap();
    assert!(report.passed(), "{name}: max rel err {} at {:?}", report.max_rel_err, report.failing);
    assert!(report.checked == point.numel());

    let mut g = Graph::new();
    let x = g.leaf(point, true);
    scalar(&mut g, x).unwrap();
    SEEN.with(|s| {
        let mut s = s.borrow_mut();
        s.extend(g.op_names());
    });
}

fn scaled(mut t: Tensor<f64>, c: f64) -> Tensor<f64> {
    t.data_mut().iter_mut().for_each(|v| *v *= c);
    t
}

/// Moves every coordinate at least 0.1 away from the relu kink.
fn off_kink(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        *v += 0.1f64.copysign(*v);
    }
    t
}

fn elementwise() {
    let x = rand_t(&[3, 4], 1);
    let other = rand_t(&[3, 4], 2);
    for op in ["add", "sub", "mul"] {
        for lhs in [true, false] {
            let o = other.clone();
            check(op, x.clone(), move |g, x| {
                let c = g.constant(o.clone());
                let (a, b) = if lhs { (x, c) } else { (c, x) };
                match op {
                    "add" => g.add(a, b),
                    "sub" => g.sub(a, b),
                    _ => g.mul(a, b),
                }
            });
        }
    }
    check("scale", x.clone(), |g, x| g.scale(x, -1.7));
    check("relu", off_kink(x.clone()), |g, x| g.relu(x));
    check("gelu", off_kink(x.clone()), |g, x| g.gelu(x));
    check("sigmoid", scaled(x.clone(), 3.0), |g, x| g.sigmoid(x));
    check("tanh", scaled(x, 2.0), |g, x| g.tanh(x));
}

fn linear_algebra() {
    let a = rand_t(&[3, 5], 3);
    let b = rand_t(&[5, 2], 4);
    let bb = b.clone();
    check("matmul lhs", a.clone(), move |g, x| {
        let w = g.constant(bb.clone());
        g.matmul(x, w)
    });
    let aa = a.clone();
    check("matmul rhs", b.clone(), move |g, x| {
        let l = g.constant(aa.clone());
        g.matmul(l, x)
    });
    let bias = rand_t(&[1, 5], 5);
    let bias2 = bias.clone();
    check("add_bias x", a.clone(), move |g, x| {
        let c = g.constant(bias2.clone());
        g.add_bias(x, c)
    });
    let aa = a.clone();
    check("add_bias bias", bias, move |g, x| {
        let c = g.constant(aa.clone());
        g.add_bias(c, x)
    });
    let (w, bv) = (rand_t(&[5, 3], 6), rand_t(&[1, 3], 7));
    check("linear", a, move |g, x| {
        let w = g.constant(w.clone());
        let b = g.constant(bv.clone());
        g.linear(x, w, b)
    });
}

fn shape_ops() {
    let x = rand_t(&[6, 4], 8);
    check("gather", x.clone(), |g, x| g.embedding_gather(x, &[5, 0, 0, 3, 5, 5]));
    let y = rand_t(&[6, 2], 9);
    let y2 = y.clone();
    check("concat_cols", x.clone(), move |g, x| {
        let c = g.constant(y2.clone());
        g.concat_last_axis(&[c, x, c])
    });
    let z = rand_t(&[4, 4], 10);
    let z2 = z.clone();
    check("concat_rows", x.clone(), move |g, x| {
        let c = g.constant(z2.clone());
        g.concat_rows(&[x, c])
    });
    check("concat_rows grouped", x.clone(), move |g, x| {
        let c = g.constant(z.clone());
        g.concat_rows_grouped(&[c, x], 2)
    });
    check("slice_rows", x.clone(), |g, x| g.slice_rows(x, 1, 4));
    check("slice_cols", x.clone(), |g, x| g.slice_cols(x, 1, 3));
    check("reshape", x.clone(), |g, x| g.reshape(x, &[3, 8]));
    check("mean_pool", x.clone(), |g, x| g.mean_pool(x, 3));
    check("mean", x.clone(), |g, x| g.mean(x));
    check("sum", x, |g, x| g.sum(x));
}

fn normalisers() {
    let x = rand_t(&[4, 6], 11);
    let other = rand_t(&[4, 6], 12);
    let o = other.clone();
    check("cosine lhs", x.clone(), move |g, x| {
        let c = g.constant(o.clone());
        g.cosine_similarity(x, c)
    });
    let xx = x.clone();
    check("cosine rhs", other, move |g, x| {
        let c = g.constant(xx.clone());
        g.cosine_similarity(c, x)
    });
    let (gain, bias) = (rand_t(&[1, 6], 13), rand_t(&[1, 6], 14));
    let (g2, b2) = (gain.clone(), bias.clone());
    check("layer_norm x", x.clone(), move |g, x| {
        let gn = g.constant(g2.clone());
        let bs = g.constant(b2.clone());
        g.layer_norm(x, gn, bs, 1e-5)
    });
    let (xx, b2) = (x.clone(), bias.clone());
    check("layer_norm gain", gain.clone(), move |g, p| {
        let x = g.constant(xx.clone());
        let bs = g.constant(b2.clone());
        g.layer_norm(x, p, bs, 1e-5)
    });
    let xx = x.clone();
    check("layer_norm bias", bias, move |g, p| {
        let x = g.constant(xx.clone());
        let gn = g.constant(gain.clone());
        g.layer_norm(x, gn, p, 1e-5)
    });
    check("softmax", scaled(x.clone(), 2.0), |g, x| g.softmax_last_axis(x));
    check("cross_entropy", scaled(x, 2.0), |g, x| g.cross_entropy_from_logits(x, &[0, 5, 2, 2]));
}

fn attention() {
    let (batch, heads, d) = (2, 2, 4);
    let specs = [
        ("full", AttnSpec { batch, heads, q_len: 3, k_len: 3, causal: false, key_pad: None }),
        ("causal", AttnSpec::causal(batch, heads, 3)),
        (
            "causal padded tail queries",
            AttnSpec {
                batch,
                heads,
                q_len: 2,
                k_len: 4,
                causal: true,
                key_pad: Some(vec![true, false, false, false, true, true, false, false]),
            },
        ),
    ];
    for (name, spec) in specs {
        let q = scaled(rand_t(&[batch * spec.q_len, d], 20), 2.0);
        let k = scaled(rand_t(&[batch * spec.k_len, d], 21), 2.0);
        let v = rand_t(&[batch * spec.k_len, d], 22);
        for (role, point) in [("q", q.clone()), ("k", k.clone()), ("v", v.clone())] {
            let (q, k, v, spec) = (q.clone(), k.clone(), v.clone(), spec.clone());
            check(&format!("attention {name} {role}"), point, move |g, x| {
                let cq = if role == "q" { x } else { g.constant(q.clone()) };
                let ck = if role == "k" { x } else { g.constant(k.clone()) };
                let cv = if role == "v" { x } else { g.constant(v.clone()) };
                g.attention(cq, ck, cv, spec.clone())
            });
        }
    }
}

pub fn composed_blocks() {
    let (d, ff, rows, batch) = (8, 16, 3, 2);
    let mut reg = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    nn::add_block(&mut reg, &mut rng, "b0", d, ff).unwrap();
    nn::add_block(&mut reg, &mut rng, "b1", d, ff).unwrap();
    let reg: ParamRegistry<f64> = reg.cast();
    let x = rand_t(&[batch * rows, d], 31);
    let pad = [true, false, false, false, false, false];
    let build = |g: &mut Graph<f64>, reg: &ParamRegistry<f64>| -> Result<Var> {
        let mut h = g.constant(x.clone());
        for prefix in ["b0", "b1"] {
            let inp = BlockInput { batch, rows, queries: rows, heads: 2, cache: None, key_pad: Some(&pad) };
            h = nn::block(g, reg, prefix, h, &inp)?.out;
        }
        readout(g, h)
    };
    let reports = grad_check_params(&reg, build, 1e-5, 1e-3).unwrap();
    assert_eq!(reports.len(), reg.iter().count());
    for (name, r) in reports {
        assert!(r.passed(), "{name}: max rel err {} at {:?}", r.max_rel_err, r.failing);
    }
}

/// Every kernel against central differences, then a check that the checks
/// touched every kernel the tape can record.
pub fn kernels() {
    SEEN.with(|s| s.borrow_mut().clear());
    elementwise();
    linear_algebra();
    shape_ops();
    normalisers();
    attention();
    let seen = SEEN.with(|s| s.borrow().clone());
    let missing: Vec<_> = KERNELS.iter().filter(|k| !seen.contains(*k)).collect();
    assert!(missing.is_empty(), "kernels without a gradient check: {missing:?}");
}
