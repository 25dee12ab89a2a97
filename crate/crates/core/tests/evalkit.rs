use actjepa::baselines::AnyModel;
use actjepa::datastore::Dataset;
use actjepa::evalkit::*;
use actjepa::model::*;
use actjepa::simenv::*;
use actjepa::trainer::{AlternationCurve, CurvePoint};

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        encoder_layers: 1,
        predictor_layers: 1,
        decoder_layers: 1,
        ..ModelConfig::default()
    }
}

/// Plays back the expert's recorded chunks for one known (task, seed).
struct Replay(Vec<ActionVector>);

impl PolicySource for Replay {
    fn make(&self) -> Box<dyn Policy + '_> {
        Box::new(ReplayPolicy::new(self.0.clone(), 8))
    }
}

#[test]
fn replayed_expert_chunks_reproduce_trajectories() {
    for task in TaskSpec::suite() {
        for seed in [0, 17, 39] {
            let rec = collect_expert_episode(&task, seed).unwrap();
            let mut p = ReplayPolicy::new(rec.actions.clone(), 8);
            let ep = run_episode_until(&task, seed, &mut p, task.episode_len, false).unwrap();
            assert_eq!(ep.trajectory, rec);
            let src = Replay(rec.actions.clone());
            let entry = EvalEntry {
                model: "replay".into(),
                train_seed: 0,
                source: &src,
            };
            let t = evaluate_success(&[entry], &[task], &[seed]).unwrap();
            assert!(t.rows[0].success);
            let r = rollout(&task, seed, src.make().as_mut(), task.episode_len).unwrap();
            assert_eq!(r.trajectory.actions[..], rec.actions[..r.steps]);
        }
    }
}

#[test]
fn expert_scores_full_and_null_scores_zero() {
    let tasks = TaskSpec::suite();
    let seeds = eval_seeds(10);
    let entries = [
        EvalEntry {
            model: "expert".into(),
            train_seed: 0,
            source: &ExpertSource,
        },
        EvalEntry {
            model: "null".into(),
            train_seed: 0,
            source: &NullSource,
        },
    ];
    let t = evaluate_success(&entries, &tasks, &seeds).unwrap();
    assert_eq!(t.rows.len(), 60);
    let agg = t.aggregates();
    assert_eq!(agg[0].model, "expert");
    assert_eq!(agg[0].mean, 100.0);
    assert_eq!(agg[1].mean, 0.0);
    assert!(t.rows.iter().filter(|r| r.model == "null").all(|r| r.steps == EPISODE_LEN));
}

#[test]
fn standard_protocol_has_ninety_rows_per_model() {
    let models: Vec<AnyModel> = (0..3)
        .map(|s| AnyModel::init(&small(), ModelKind::Act, s).unwrap())
        .collect();
    let entries: Vec<EvalEntry> = models
        .iter()
        .enumerate()
        .map(|(i, m)| EvalEntry {
            model: "act".into(),
            train_seed: i as u64,
            source: m,
        })
        .collect();
    let t = evaluate_success(&entries, &TaskSpec::suite(), &eval_seeds(10)).unwrap();
    assert_eq!(t.rows.len(), 90);
    let again = evaluate_success(&entries, &TaskSpec::suite(), &eval_seeds(10)).unwrap();
    assert_eq!(t, again);
    let agg = t.aggregates();
    assert_eq!(agg.len(), 1);
    assert_eq!(agg[0].per_seed.len(), 3);
    assert_eq!(eval_seeds(3), vec![10_000, 10_001, 10_002]);
}

#[test]
fn aggregates_ignore_row_order() {
    let row = |seed: u64, ok: bool| EvalRow {
        model: "m".into(),
        task: "reach".into(),
        train_seed: seed,
        eval_seed: 10_000,
        success: ok,
        steps: 10,
        queries: 2,
    };
    let a = EvalTable {
        rows: vec![row(0, true), row(0, false), row(1, true), row(1, true)],
    };
    let mut b = a.clone();
    b.rows.reverse();
    assert_eq!(a.aggregates(), b.aggregates());
    let agg = &a.aggregates()[0];
    assert_eq!(agg.per_seed, vec![(0, 50.0), (1, 100.0)]);
    assert_eq!(agg.mean, 75.0);
    assert!((agg.std - 1250f64.sqrt()).abs() < 1e-12);
    assert_eq!(a.success_rate(), 0.75);
}

#[test]
fn chunked_rollout_queries_every_n_steps() {
    let m = AnyModel::init(&small(), ModelKind::ActJepa, 0).unwrap();
    let chunk = m.as_chunk().unwrap();
    let task = TaskSpec::by_name("push").unwrap();
    let r = rollout_chunked(&task, 10_003, chunk, task.episode_len).unwrap();
    assert_eq!(r.queries, r.steps.div_ceil(8));
    let mut p = m.policy();
    let direct = rollout(&task, 10_003, p.as_mut(), task.episode_len).unwrap();
    assert_eq!(direct, r);
}

fn curve(n: usize) -> AlternationCurve {
    AlternationCurve {
        points: (0..n)
            .map(|i| CurvePoint {
                pretrain_epoch: i + 1,
                finetune_action_loss: 1.0 / (i + 1) as f64,
                pretrain_observation_loss: 0.5,
                encoder_hash: format!("{i:064x}"),
            })
            .collect(),
    }
}

#[test]
fn reports_are_deterministic() {
    let eval = evaluate_success(
        &[EvalEntry {
            model: "expert".into(),
            train_seed: 0,
            source: &ExpertSource,
        }],
        &TaskSpec::suite(),
        &eval_seeds(2),
    )
    .unwrap();
    let probes = vec![ProbeReport {
        model: "act".into(),
        runs: vec![ProbeRun {
            probe_seed: 0,
            rmse: 0.1,
            ate: 0.2,
            encoder_hash_before: "a".into(),
            encoder_hash_after: "a".into(),
        }],
    }];
    let c = curve(12);
    let tables = ReportTables {
        eval: Some(&eval),
        probes: Some(&probes),
        curve: Some(&c),
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let names = write_report(&tables, d1.path()).unwrap();
    assert_eq!(names, vec![EVAL_CSV, EVAL_SUMMARY_CSV, PROBE_CSV, CURVE_CSV, CURVE_SVG]);
    write_report(&tables, d2.path()).unwrap();
    for n in &names {
        let a = std::fs::read(d1.path().join(n)).unwrap();
        let b = std::fs::read(d2.path().join(n)).unwrap();
        assert_eq!(a, b, "{n}");
    }
    let svg = std::fs::read_to_string(d1.path().join(CURVE_SVG)).unwrap();
    assert_eq!(svg.matches(r#"class="point""#).count(), 12);
    let csv = std::fs::read_to_string(d1.path().join(EVAL_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let summary = std::fs::read_to_string(d1.path().join(EVAL_SUMMARY_CSV)).unwrap();
    assert!(summary.lines().nth(1).unwrap().ends_with("100.0 ± 0.0"));
    let probe = std::fs::read_to_string(d1.path().join(PROBE_CSV)).unwrap();
    assert!(probe.lines().nth(1).unwrap().starts_with("act,0,10.0000,20.0000"));
    assert_eq!(curve_csv(&c).lines().count(), 13);

    let only_curve = ReportTables {
        curve: Some(&c),
        ..Default::default()
    };
    let d3 = tempfile::tempdir().unwrap();
    assert_eq!(write_report(&only_curve, d3.path()).unwrap(), vec![CURVE_CSV, CURVE_SVG]);
}

#[test]
fn probe_leaves_encoder_frozen_and_is_seeded() {
    let mut eps = Vec::new();
    for task in TaskSpec::suite() {
        for seed in 0..5 {
            eps.push(collect_expert_episode(&task, seed).unwrap());
        }
    }
    let ds = Dataset::new(eps, 8, 0).unwrap();
    let mut m = ChunkModel::<f32>::init(&small(), ModelKind::ActJepa, 0).unwrap();
    m.norm = ds.norm().clone();
    let cfg = ProbeConfig {
        epochs: 1,
        batch_size: 16,
        ..ProbeConfig::default()
    };
    let a = probe_representation(&m, &ds, 1, &cfg).unwrap();
    let b = probe_representation(&m, &ds, 1, &cfg).unwrap();
    let c = probe_representation(&m, &ds, 2, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.rmse, c.rmse);
    assert_eq!(a.encoder_hash_before, a.encoder_hash_after);
    assert!(a.rmse > 0.0 && a.ate > 0.0 && a.rmse.is_finite());
    let report = probe_seeds("jepa", &m, &ds, &[1, 2], &cfg).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert_eq!(report.runs[0], a);
}
