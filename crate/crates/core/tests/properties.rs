use std::collections::HashMap;

use hamletbench::backbone::BackboneConfig;
use hamletbench::bundle::PolicyBundle;
use hamletbench::env::{chunk_at, demo_set, single_frame_ceiling, Action, GridState, TaskId, Trajectory};
use hamletbench::memory::{self, MemoryConfig};
use hamletbench::tensor::{AdamConfig, AttnSpec, Graph, ParamRegistry, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t<F: hamletbench::tensor::Real>(shape: &[usize], seed: u64) -> Tensor<F> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn task() -> impl Strategy<Value = TaskId> {
    prop::sample::select(TaskId::ALL.to_vec())
}

/// Chunk-aligned accuracy of an arbitrary memoryless policy, keyed on raw
/// observation bytes, instruction tokens and the gripper cell.
type RawKey = (Vec<u8>, Vec<u8>, (usize, usize, bool));

fn raw_key(traj: &Trajectory, t: usize) -> RawKey {
    let s = &traj.steps[t];
    (s.obs.cells.to_vec(), traj.instruction.tokens().to_vec(), s.proprio.cell())
}

fn aligned(trajs: &[Trajectory], k: usize) -> impl Iterator<Item = (&Trajectory, usize)> {
    trajs.iter().flat_map(move |tr| (0..tr.len()).step_by(k).map(move |t| (tr, t)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f32..40.0) {
        let mut g = Graph::<f32>::new();
        let mut x = rand_t::<f32>(&[rows, cols], seed);
        x.data_mut().iter_mut().for_each(|v| *v *= spread);
        let x = g.constant(x);
        let y = g.softmax_last_axis(x).unwrap();
        for r in 0..rows {
            let s: f32 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row {r} sums to {s}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_open_keys(
        batch in 1usize..3, heads in 1usize..3, q_len in 1usize..5, extra in 0usize..4,
        causal in any::<bool>(), pad_bits in any::<u32>(), seed in any::<u64>(),
    ) {
        let k_len = q_len + extra;
        let d = 2 * heads;
        let pad: Vec<bool> = (0..batch * k_len).map(|i| pad_bits >> (i % 32) & 1 == 1).collect();
        let spec = AttnSpec { batch, heads, q_len, k_len, causal, key_pad: Some(pad.clone()) };
        let mut g = Graph::<f32>::new();
        let q = g.constant(rand_t(&[batch * q_len, d], seed));
        let k = g.constant(rand_t(&[batch * k_len, d], seed ^ 1));
        let v = g.constant(rand_t(&[batch * k_len, d], seed ^ 2));
        let a = g.attention(q, k, v, spec).unwrap();
        let (_, probs) = g.attention_probs(a).unwrap();
        for (row_i, row) in probs.chunks(k_len).enumerate() {
            let (b, i) = (row_i / (heads * q_len), row_i % q_len);
            let pos = extra + i;
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            for (j, &p) in row.iter().enumerate() {
                let open = (!causal || j <= pos) && (!pad[b * k_len + j] || j == pos);
                if !open {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn frozen_parameters_survive_adam(steps in 1u64..20, seed in any::<u64>(), lr in 1e-4f64..1e-1) {
        let mut reg = ParamRegistry::<f32>::new();
        let a = reg.add("live.w", rand_t(&[3, 3], seed), false).unwrap();
        let b = reg.add("frozen.w", rand_t(&[3, 3], seed ^ 7), true).unwrap();
        let before = reg.snapshot("frozen.");
        let start = reg.snapshot("live.");
        for step in 1..=steps {
            let mut g = Graph::new();
            let (pa, pb) = (g.param(&reg, a), g.param(&reg, b));
            let y = g.matmul(pa, pb).unwrap();
            let y = g.tanh(y).unwrap();
            let loss = g.sum(y).unwrap();
            let grads = g.backward(loss).unwrap();
            reg.adam_step(&grads, &AdamConfig::with_lr(lr), step).unwrap();
        }
        prop_assert!(reg.drifted(&before).is_empty());
        prop_assert_eq!(reg.drifted(&start).len(), 1);
    }

    #[test]
    fn stacked_history_has_t_times_n_rows(
        n_moment in prop::sample::select(vec![1usize, 2, 4, 8, 16]),
        history in 1usize..9,
        fill in prop::collection::vec(1usize..9, 1..4),
    ) {
        let cfg = MemoryConfig { d_model: 8, heads: 2, layers: 1, ff: 8, n_moment, history };
        let mut reg = ParamRegistry::new();
        memory::init_memory(&mut reg, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        let entries: Vec<Tensor<f32>> = (0..history).map(|i| rand_t(&[n_moment, 8], i as u64)).collect();
        let windows: Vec<Vec<&Tensor<f32>>> = fill.iter().map(|&f| entries[..f.min(history)].iter().collect()).collect();
        let mut g = Graph::new();
        let (stack, pad) = memory::stack_windows(&mut g, &reg, &cfg, &windows).unwrap();
        prop_assert_eq!(cfg.rows(), history * n_moment);
        prop_assert_eq!(g.value(stack).shape(), &[windows.len() * history * n_moment, 8][..]);
        for (w, flags) in windows.iter().zip(pad.chunks(cfg.rows())) {
            prop_assert_eq!(flags.iter().filter(|p| **p).count(), (history - w.len()) * n_moment);
        }
        let out = memory::consolidate(&mut g, &reg, &cfg, stack, &pad, false).unwrap();
        prop_assert_eq!(g.value(out.feature).shape(), &[windows.len() * n_moment, 8][..]);
    }

    #[test]
    fn tcl_loss_is_ln2_when_positive_and_negative_coincide(batch in 1usize..6, d in 2usize..9, seed in any::<u64>(), tau in 0.05f64..2.0) {
        let mut g = Graph::<f64>::new();
        let z = g.constant(rand_t(&[batch, d], seed));
        let other = g.constant(rand_t(&[batch, d], seed ^ 3));
        let loss = memory::tcl_loss(&mut g, z, other, other, tau).unwrap();
        prop_assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn tcl_loss_moves_with_similarities(d in 2usize..9, seed in any::<u64>(), step in 0.01f64..0.5) {
        let (z, zp, zn) = (rand_t::<f64>(&[1, d], seed), rand_t::<f64>(&[1, d], seed ^ 5), rand_t::<f64>(&[1, d], seed ^ 9));
        let toward = |from: &Tensor<f64>| {
            let data = from.data().iter().zip(z.data()).map(|(a, b)| a + step * (b - a)).collect();
            Tensor::new(vec![1, d], data).unwrap()
        };
        let eval = |zp: &Tensor<f64>, zn: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let (a, p, n) = (g.constant(z.clone()), g.constant(zp.clone()), g.constant(zn.clone()));
            let sp = g.cosine_similarity(a, p).unwrap();
            let sn = g.cosine_similarity(a, n).unwrap();
            let loss = memory::tcl_loss(&mut g, a, p, n, 0.1).unwrap();
            (g.value(loss).item(), g.value(sp).item(), g.value(sn).item())
        };
        let (base, sp0, sn0) = eval(&zp, &zn);
        let (closer_pos, sp1, _) = eval(&toward(&zp), &zn);
        let (closer_neg, _, sn1) = eval(&zp, &toward(&zn));
        prop_assume!(sp1 > sp0 + 1e-9 && sn1 > sn0 + 1e-9);
        prop_assert!(closer_pos < base);
        prop_assert!(closer_neg > base);
    }

    #[test]
    fn simulator_replays_identically(task in task(), seed in any::<u64>(), actions in prop::collection::vec(0usize..6, 1..150)) {
        let mut a = GridState::new(task, seed);
        let mut b = GridState::new(task, seed);
        for &id in &actions {
            if a.is_done() {
                break;
            }
            let act = Action::from_id(id).unwrap();
            let (oa, ob) = (a.step(act).unwrap(), b.step(act).unwrap());
            prop_assert_eq!(oa.obs, ob.obs);
            prop_assert_eq!(a.proprio(), b.proprio());
            prop_assert_eq!(a.full_success(), b.full_success());
            prop_assert_eq!(a.partial_success(), b.partial_success());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn no_memoryless_policy_beats_the_ceiling(task in task(), seed in any::<u64>(), policy_seed in any::<u64>(), k in 1usize..6) {
        let trajs = demo_set(task, 12, seed).unwrap().trajectories;
        let report = single_frame_ceiling(&trajs, k, k);

        // Independent grouping oracle: majority chunk per raw key.
        let mut groups: HashMap<RawKey, HashMap<Vec<Action>, usize>> = HashMap::new();
        let mut total = 0;
        for (tr, t) in aligned(&trajs, k) {
            *groups.entry(raw_key(tr, t)).or_default().entry(chunk_at(tr, t, k)).or_default() += 1;
            total += 1;
        }
        let best: usize = groups.values().map(|g| *g.values().max().unwrap()).sum();
        prop_assert_eq!(report.timesteps, total);
        prop_assert_eq!(report.groups, groups.len());
        prop_assert!((report.ceiling - best as f64 / total as f64).abs() < 1e-12);

        // An arbitrary memoryless policy: for each key, some chunk seen there
        // or a random one.
        let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
        let choice: HashMap<&RawKey, Vec<Action>> = groups
            .iter()
            .map(|(key, chunks)| {
                let seen: Vec<&Vec<Action>> = chunks.keys().collect();
                let pick = if rng.random_bool(0.8) {
                    seen[rng.random_range(0..seen.len())].clone()
                } else {
                    (0..k).map(|_| Action::from_id(rng.random_range(0..6)).unwrap()).collect()
                };
                (key, pick)
            })
            .collect();
        let hits = aligned(&trajs, k).filter(|(tr, t)| choice[&raw_key(tr, *t)] == chunk_at(tr, *t, k)).count();
        prop_assert!(hits as f64 / total as f64 <= report.ceiling + 1e-9);
    }

    #[test]
    fn bundle_bytes_round_trip(seed in any::<u64>(), n_moment in 1usize..4) {
        let bb = BackboneConfig { d_model: 8, heads: 2, layers: 1, ff: 16, ..BackboneConfig::default() };
        let mem = MemoryConfig { d_model: 8, heads: 2, layers: 1, ff: 16, n_moment, history: 2 };
        let b = PolicyBundle::init_stage1(&bb, &mem, 4, &TaskId::ALL, seed).unwrap();
        let bytes = b.to_bytes();
        let back = PolicyBundle::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.meta, b.meta);
    }
}
