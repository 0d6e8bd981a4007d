use std::collections::BTreeMap;

use hamletbench::backbone::BackboneConfig;
use hamletbench::bundle::{Mode, PolicyBundle};
use hamletbench::env::{reset, TaskId};
use hamletbench::harness::{
    attention_rollout, config_schema, evaluate_policy, export_attention, parse_csv, profiling_bundles, read_results, rollouts, write_report,
    ExperimentConfig, ExpertController, HeldOut, RandomController, ReportFormat, ResultRow, Results, CSV_COLUMNS,
};
use hamletbench::harness::profile::{backbone_tokens, decision_macs, decision_peak};
use hamletbench::memory::MemoryConfig;
use proptest::prelude::*;

fn tiny() -> (BackboneConfig, MemoryConfig) {
    let bb = BackboneConfig { d_model: 16, heads: 2, layers: 1, ff: 32, ..BackboneConfig::default() };
    let mem = MemoryConfig { d_model: 16, heads: 2, layers: 1, ff: 32, n_moment: 2, history: 3 };
    (bb, mem)
}

fn hamlet() -> PolicyBundle {
    let (bb, mem) = tiny();
    let s1 = PolicyBundle::init_stage1(&bb, &mem, 4, &TaskId::ALL, 1).unwrap();
    PolicyBundle::attach_memory(&s1, Mode::Hamlet, &mem, 2).unwrap()
}

#[test]
fn expert_always_succeeds_and_random_almost_never() {
    for task in TaskId::ALL {
        let expert = rollouts(&ExpertController { chunk: 4 }, task, 100, 3).unwrap();
        assert!(expert.iter().all(|o| o.full && o.partial), "{task}");
        let random = rollouts(&RandomController { chunk: 4 }, task, 100, 3).unwrap();
        let rate = random.iter().filter(|o| o.full).count() as f64 / 100.0;
        assert!(rate < 0.02, "{task}: random controller full success {rate}");
        assert!(random.iter().all(|o| o.length <= 120));
    }
}

#[test]
fn evaluation_is_reproducible_and_paired() {
    let b = hamlet();
    let held = Some(HeldOut { demos: 4, seed: 9 });
    let a = evaluate_policy(&b, TaskId::CoverAndStack, 6, 11, held).unwrap();
    let again = evaluate_policy(&b, TaskId::CoverAndStack, 6, 11, held).unwrap();
    assert_eq!(a, again);
    assert_eq!(a.episodes, 6);
    assert!((0.0..=1.0).contains(&a.full) && (0.0..=1.0).contains(&a.partial));
    assert!(a.chunk_accuracy.is_some() && a.ceiling.is_some());

    // Any controller sees the same episode seeds for the same evaluation seed.
    let expert = rollouts(&ExpertController { chunk: 4 }, TaskId::CoverAndStack, 6, 11).unwrap();
    let seeds: Vec<u64> = a.outcomes.iter().map(|o| o.seed).collect();
    assert_eq!(seeds, expert.iter().map(|o| o.seed).collect::<Vec<_>>());
}

fn results_for(b: &PolicyBundle) -> Results {
    let cfg = ExperimentConfig::default();
    let eval = evaluate_policy(b, TaskId::PickPlaceTwice, 3, 5, None).unwrap();
    let mut details = BTreeMap::new();
    details.insert("outcomes".into(), serde_json::to_value(&eval.outcomes).unwrap());
    Results {
        fingerprint: cfg.fingerprint(),
        config: serde_json::to_value(&cfg).unwrap(),
        rows: vec![ResultRow::from_eval("hamlet", &eval, b)],
        details,
    }
}

#[test]
fn reports_regenerate_byte_identically() {
    let b = hamlet();
    let dir = tempfile::tempdir().unwrap();
    let (r1, r2) = (results_for(&b), results_for(&b));
    for (name, format) in [("a.json", ReportFormat::Json), ("a.csv", ReportFormat::Csv)] {
        let p1 = dir.path().join("one").join(name);
        let p2 = dir.path().join("two").join(name);
        write_report(&r1, format, &p1).unwrap();
        write_report(&r2, format, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap(), "{name}");
    }
    let back = read_results(&dir.path().join("one/a.json")).unwrap();
    assert_eq!(back, r1);
    let csv = std::fs::read_to_string(dir.path().join("one/a.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(parse_csv(&csv).unwrap(), r1.rows);
}

#[test]
fn invalid_rows_are_refused() {
    let b = hamlet();
    let mut r = results_for(&b);
    r.rows[0].full = 1.5;
    assert!(write_report(&r, ReportFormat::Csv, &tempfile::tempdir().unwrap().path().join("x.csv")).is_err());
    let mut r = results_for(&b);
    r.rows[0].variant = "a,b".into();
    assert!(r.validate().is_err());
    assert!("xml".parse::<ReportFormat>().is_err());
}

fn opt_f64() -> impl Strategy<Value = Option<f64>> {
    prop::option::of(-1e6f64..1e6)
}

proptest! {
    #[test]
    fn csv_round_trips(
        variant in "[a-z_]{1,12}", full in 0.0f64..=1.0, partial in 0.0f64..=1.0, n in 0usize..1000,
        se in 0.0f64..0.5, ceiling in opt_f64(), chunk_acc in opt_f64(), tokens in prop::option::of(0usize..10_000),
        macs in prop::option::of(any::<u64>()), latency in opt_f64(), peak in prop::option::of(any::<u64>()),
    ) {
        let row = ResultRow {
            variant, task: "swap_cubes".into(), full, partial, n, se, ceiling, chunk_acc, tokens, macs,
            latency_ms: latency, peak_scalars: peak,
        };
        let r = Results { rows: vec![row.clone(), row], ..Results::default() };
        prop_assert_eq!(parse_csv(&r.to_csv()).unwrap(), r.rows.clone());
        let json: Results = serde_json::from_str(&r.to_json()).unwrap();
        prop_assert_eq!(json, r);
    }
}

#[test]
fn schema_file_matches_the_config_types() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/schema/experiment.schema.json");
    let mut expected = serde_json::to_string_pretty(&config_schema()).unwrap();
    expected.push('\n');
    assert_eq!(std::fs::read_to_string(path).unwrap(), expected, "run the write_schema example");
}

#[test]
fn config_validation_and_fingerprint() {
    let cfg = ExperimentConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    let back = ExperimentConfig::from_json_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.fingerprint(), cfg.fingerprint());
    assert_eq!(cfg.fingerprint().len(), 64);

    let mut changed = cfg.clone();
    changed.eval.episodes += 1;
    assert_ne!(changed.fingerprint(), cfg.fingerprint());

    assert_eq!(ExperimentConfig::from_json_str("{}").unwrap(), cfg);
    for bad in [
        r#"{"sed": 1}"#,
        r#"{"backbone": {"d_model": 64, "dropout": 0.1}}"#,
        r#"{"tasks": ["stack_everything"]}"#,
        r#"{"seed": -1}"#,
        r#"{"tasks": []}"#,
        r#"{"memory": {"d_model": 32}}"#,
        r#"{"ablation": {"n_moment": [3]}}"#,
        r#"{"chunk": 0}"#,
        "not json",
    ] {
        assert!(ExperimentConfig::from_json_str(bad).is_err(), "{bad} accepted");
    }
}

#[test]
fn attention_exports_are_distributions() {
    let b = hamlet();
    let dump = attention_rollout(&b, TaskId::SwapCubes, 4).unwrap();
    assert_eq!(dump.n_moment, 2);
    assert!(!dump.steps.is_empty());
    for (i, step) in dump.steps.iter().enumerate() {
        assert_eq!(step.t, 4 * i);
        assert_eq!(step.moment_maps.len(), 2);
        for map in &step.moment_maps {
            let s: f64 = map.iter().flatten().sum();
            assert!(s <= 1.0 + 1e-6 && s > 0.0);
        }
        let mem = step.memory.as_ref().unwrap();
        assert_eq!(mem.len(), 3);
        assert_eq!(step.padded.len(), 3);
        assert!((mem.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (w, &p) in mem.iter().zip(&step.padded) {
            if p {
                assert_eq!(*w, 0.0);
            }
        }
        let real = step.padded.iter().filter(|p| !**p).count();
        assert_eq!(real, (i + 1).min(3));
    }

    let dir = tempfile::tempdir().unwrap();
    let files = export_attention(&b, TaskId::SwapCubes, 4, 2, dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    let first: serde_json::Value = serde_json::from_slice(&std::fs::read(&files[0]).unwrap()).unwrap();
    assert_eq!(first["steps"].as_array().unwrap().len(), dump.steps.len());

    let (bb, mem) = tiny();
    let single = PolicyBundle::init_stage1(&bb, &mem, 4, &TaskId::ALL, 1).unwrap();
    assert!(attention_rollout(&single, TaskId::SwapCubes, 4).is_err());
}

#[test]
fn analytic_costs_follow_the_scaling_laws() {
    let (bb, mem) = tiny();
    let ts = [1, 2, 4, 8];
    let bundles = profiling_bundles(&bb, &mem, 4, &ts, 0).unwrap();
    let instr = reset(TaskId::PickPlaceTwice, 0).3.tokens().len();
    let single = backbone_tokens(&bundles[0], instr);
    let mut hamlet_tokens = Vec::new();
    let mut multi_tokens = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let (h, m) = (&bundles[1 + 2 * i], &bundles[2 + 2 * i]);
        assert_eq!(h.meta.mode, Mode::Hamlet);
        assert_eq!(m.meta.mode, Mode::MultiFrame);
        hamlet_tokens.push(backbone_tokens(h, instr));
        multi_tokens.push(backbone_tokens(m, instr));
        assert_eq!(multi_tokens[i], instr + 49 * t + 1);
        assert!(decision_macs(h, instr) > decision_macs(&bundles[0], instr));
        assert!(decision_peak(m, instr) >= decision_peak(&bundles[0], instr));
    }
    assert!(hamlet_tokens.iter().all(|&n| n == single + mem.n_moment));
    // Linear growth: constant increments of one frame per extra step.
    for w in ts.windows(2).zip(multi_tokens.windows(2)) {
        let ((t0, t1), (a, b)) = ((w.0[0], w.0[1]), (w.1[0], w.1[1]));
        assert_eq!(b - a, 49 * (t1 - t0));
    }
    assert!(multi_tokens[3] - instr - 1 >= 4 * (multi_tokens[1] - instr - 1));
}
