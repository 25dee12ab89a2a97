//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `ACTJEPA_ACCEPTANCE_ONLY=1,5` runs a subset; `ACTJEPA_ACCEPTANCE_STRICT=1`
//! turns any FAIL into a nonzero exit.

use std::path::Path;
use std::time::{Duration, Instant};

use actjepa::baselines::AnyModel;
use actjepa::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use actjepa::datastore::{load_dataset, save_dataset, ChunkSample, Dataset};
use actjepa::evalkit::*;
use actjepa::model::*;
use actjepa::simenv::*;
use actjepa::trainer::*;
use diffcore::{grad_check, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

// ---------------------------------------------------------------------------
// Configurations

/// Model used for the trained-policy criteria.
fn suite_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        ffn_dim: 64,
        ..ModelConfig::default()
    }
}

fn suite_train(kind: ModelKind, seed: u64) -> TrainConfig {
    TrainConfig {
        model: kind,
        epochs: 30,
        batch_size: 8,
        steps_per_epoch: Some(200),
        seed,
        select_every: 5,
        ..TrainConfig::default()
    }
}

const DEMOS_PER_TASK: u64 = 40;
const TRAIN_SEEDS: u64 = 3;
const EVAL_SEEDS: usize = 10;
const PROBE_SEEDS: [u64; 3] = [0, 1, 2];
const ALTERNATE_ROUNDS: usize = 10;

fn standard_dataset() -> actjepa::Result<Dataset> {
    let mut eps = Vec::new();
    for task in TaskSpec::suite() {
        for seed in 0..DEMOS_PER_TASK {
            eps.push(collect_expert_episode(&task, seed)?);
        }
    }
    Dataset::new(eps, 8, 0)
}

fn tiny_dataset(episodes_per_task: u64, chunk: usize) -> Dataset {
    let mut eps = Vec::new();
    for task in TaskSpec::suite() {
        for seed in 0..episodes_per_task {
            eps.push(collect_expert_episode(&task, seed).unwrap());
        }
    }
    Dataset::new(eps, chunk, 0).unwrap()
}

fn tiny_model() -> ModelConfig {
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

// ---------------------------------------------------------------------------
// 1. Gradient check

fn min_residual(m: &ChunkModel<f64>, s: &ChunkSample) -> f64 {
    let mut g = Graph::inference();
    let input = ContextInput::from_obs(&s.context, &m.norm);
    let s_x = m.encode_context(&mut g, &input).unwrap();
    let a = m.decode_actions(&mut g, s_x).unwrap();
    let p = m.predict_abstract(&mut g, s_x).unwrap();
    let y = m.encode_targets(&s.obs_targets).unwrap();
    let targets = s.action_targets.iter().flatten().copied();
    let ra = g.value(a).data().iter().zip(targets).map(|(x, t)| (x - t).abs());
    let ro = g.value(p).data().iter().zip(y.data()).map(|(x, t)| (x - t).abs());
    ra.chain(ro).fold(f64::INFINITY, f64::min)
}

fn c1_grad_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        chunk_size: 2,
        ..ModelConfig::default()
    };
    let ds = tiny_dataset(1, 2);
    let starts = ds.chunk_starts(2);
    let (mut passed, mut seed, mut worst) = (0, 0u64, 0.0f64);
    while passed < 20 {
        if seed >= 60 {
            return Err(format!("only {passed} seeds met the smoothness precondition"));
        }
        let mut m = ChunkModel::<f64>::init(&cfg, ModelKind::ActJepa, seed).map_err(fail)?;
        m.norm = ds.norm().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<ChunkSample> = starts
            .choose_multiple(&mut rng, 2)
            .map(|&(e, t)| ds.chunk_at(e, t, 2, false).unwrap())
            .collect();
        seed += 1;
        if batch.iter().map(|s| min_residual(&m, s)).fold(f64::INFINITY, f64::min) < 1e-4 {
            continue;
        }
        let ids = m.trainable_ids();
        let report = grad_check(&m.store, &ids, 1e-6, |g, store: &ParamStore<f64>| {
            let mut mm = m.clone();
            mm.store = store.clone();
            let l0 = mm.sample_loss(g, &batch[0], Objective::Joint, ActionLoss::L1).unwrap();
            let l1 = mm.sample_loss(g, &batch[1], Objective::Joint, ActionLoss::L1).unwrap();
            let s = g.add(l0.total, l1.total)?;
            Ok(g.scale(s, 0.5))
        })
        .map_err(fail)?;
        worst = worst.max(report.max_rel_error);
        if report.max_rel_error >= 1e-4 {
            return Err(format!("seed {}: max relative error {:.2e}", seed - 1, report.max_rel_error));
        }
        passed += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 120.0,
        format!("{passed} seeds, worst relative error {worst:.2e}, {secs:.1}s (limit 120s)"),
    )
}

// ---------------------------------------------------------------------------
// 2. EMA target

fn c2_ema() -> Outcome {
    let ds = tiny_dataset(2, 8);
    let mut t = Trainer::new(&ds, &tiny_model(), TrainConfig {
        steps_per_epoch: Some(1),
        batch_size: 4,
        ..TrainConfig::default()
    })
    .map_err(fail)?;
    let before = t.model.as_chunk().map_err(fail)?.clone();
    let tgt_ids = before.target_ids();
    let opt_ok = t.optimizer.params().iter().all(|p| !tgt_ids.contains(p));
    t.run_epoch(None).map_err(fail)?;
    let after = t.model.as_chunk().map_err(fail)?;
    let mom = before.config.ema_momentum;
    let mut max_ulp = 0i64;
    for (&enc, &tgt) in after.encoder_ids().iter().zip(&tgt_ids) {
        let old = before.store.get(tgt).data();
        let online = after.store.get(enc).data();
        for ((&o, &e), &got) in old.iter().zip(online).zip(after.store.get(tgt).data()) {
            let want = ema_value(mom, o as f64, e as f64) as f32;
            max_ulp = max_ulp.max((want.to_bits() as i64 - got.to_bits() as i64).abs());
        }
    }
    let moved = tgt_ids.iter().any(|&id| before.store.get(id) != after.store.get(id));

    let mut m64 = ChunkModel::<f64>::init(&tiny_model(), ModelKind::ActJepa, 3).map_err(fail)?;
    m64.norm = ds.norm().clone();
    let mut zero = true;
    for (e, tt) in ds.chunk_starts(8).into_iter().step_by(11) {
        let s = ds.chunk_at(e, tt, 8, false).map_err(fail)?;
        let mut g = Graph::new();
        let l = m64.sample_loss(&mut g, &s, Objective::Joint, ActionLoss::L1).map_err(fail)?;
        let grads = g.backward(l.total).map_err(fail)?.param_grads(&g, &m64.store);
        zero &= m64.target_ids().iter().all(|&id| grads.is_all_zero(id));
    }
    check(
        max_ulp <= 1 && zero && opt_ok && moved,
        format!("max {max_ulp} ulp from closed form, target gradient zero: {zero}, optimizer excludes target: {opt_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Token budget

fn c3_tokens() -> Outcome {
    let mut seen = Vec::new();
    for ((h, w), ctx) in [((24, 24), 18), ((24, 48), 34), ((48, 48), 66)] {
        let cfg = ModelConfig {
            image_height: h,
            image_width: w,
            ..tiny_model()
        };
        if cfg.context_tokens() != ctx {
            return Err(format!("{h}x{w}: {} context tokens, expected {ctx}", cfg.context_tokens()));
        }
        let m = ChunkModel::<f32>::init(&cfg, ModelKind::ActJepa, 0).map_err(fail)?;
        let (state, _) = reset(&TaskSpec::suite()[1], 5);
        let image = render_sized(&state, h, w);
        let input = ContextInput {
            image: &image,
            proprio: [0.0; PROPRIO_DIM],
            task_id: 1,
        };
        let mut g = Graph::inference();
        let s_x = m.encode_context(&mut g, &input).map_err(fail)?;
        let enc_calls = g.attention_calls().len();
        m.decode_actions(&mut g, s_x).map_err(fail)?;
        m.predict_abstract(&mut g, s_x).map_err(fail)?;
        let heads = &g.attention_calls()[enc_calls..];
        let n = cfg.chunk_size;
        if !heads.iter().all(|c| c.queries == n) {
            return Err(format!("context {ctx}: a head attends with other than {n} queries"));
        }
        let cross = heads.iter().filter(|c| c.keys == ctx).count();
        if cross != 2 {
            return Err(format!("context {ctx}: {cross} cross-attention calls"));
        }
        seen.push(ctx.to_string());
    }
    Ok(format!("decoder and predictor use 8 query tokens for contexts {}", seen.join("/")))
}

// ---------------------------------------------------------------------------
// 4. Determinism, round trips, resume

fn c4_determinism() -> Outcome {
    let ds = tiny_dataset(2, 8);
    let dir = tempfile::tempdir().map_err(fail)?;
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    save_dataset(&ds, &d1).map_err(fail)?;
    let back = load_dataset(&d1).map_err(fail)?;
    save_dataset(&back, &d2).map_err(fail)?;
    let bytes = |d: &Path, n: &str| std::fs::read(d.join(n)).unwrap();
    let mut data_ok = back == ds && bytes(&d1, "manifest.json") == bytes(&d2, "manifest.json");
    for n in &ds.manifest.episodes {
        data_ok &= bytes(&d1, n) == bytes(&d2, n);
    }

    let cfg = |kind| TrainConfig {
        model: kind,
        epochs: 3,
        batch_size: 4,
        steps_per_epoch: Some(4),
        seed: 5,
        ..TrainConfig::default()
    };
    let mut ok = data_ok;
    let mut notes = vec![format!("dataset round trip: {data_ok}")];
    for kind in [ModelKind::ActJepa, ModelKind::Act, ModelKind::Rbc] {
        let a = train_joint(&ds, &tiny_model(), cfg(kind), None).map_err(fail)?;
        let b = train_joint(&ds, &tiny_model(), cfg(kind), None).map_err(fail)?;
        let same = a.model == b.model && log_lines(&a.log) == log_lines(&b.log);

        let ck = Checkpoint::of_model(a.model.clone());
        let path = dir.path().join(format!("{}.ckpt", kind.name()));
        save_checkpoint(&ck, &path).map_err(fail)?;
        let loaded = load_checkpoint(&path, Some(kind)).map_err(fail)?;
        let round = loaded.model == a.model && encode_checkpoint(&loaded).map_err(fail)? == std::fs::read(&path).unwrap();

        let mut first = Trainer::new(&ds, &tiny_model(), cfg(kind)).map_err(fail)?;
        first.run_epoch(None).map_err(fail)?;
        let bytes = encode_checkpoint(&Checkpoint {
            model: first.model.clone(),
            optimizer: Some(first.optimizer.clone()),
            train: Some(first.config.clone()),
            progress: first.progress.clone(),
        })
        .map_err(fail)?;
        let r = decode_checkpoint(&bytes, Some(kind)).map_err(fail)?;
        let mut resumed = Trainer::resume(&ds, r.model, r.optimizer.unwrap(), r.train.unwrap(), r.progress)
            .map_err(fail)?;
        resumed.run(None).map_err(fail)?;
        let mut stitched = first.log.clone();
        stitched.extend(resumed.log.iter().copied());
        let resume_ok = resumed.model == a.model
            && resumed.optimizer == a.optimizer
            && log_lines(&stitched) == log_lines(&a.log);
        ok &= same && round && resume_ok;
        notes.push(format!("{}: rerun {same}, checkpoint {round}, resume {resume_ok}", kind.name()));
    }
    check(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 5. Overfitting four chunks

fn c5_overfit() -> Outcome {
    let start = Instant::now();
    let ds = tiny_dataset(1, 8);
    let units: Vec<(usize, usize)> = ds.chunk_starts(8).into_iter().step_by(40).take(4).collect();
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&ds, &suite_model(), cfg).map_err(fail)?;
    let mut initial = None;
    let mut last = f64::NAN;
    for step in 0..2000u64 {
        let (loss, grads) = t.batch_gradient(&units).map_err(fail)?;
        let la = loss.actions.ok_or("no action loss")?;
        let init = *initial.get_or_insert(la);
        last = la;
        if la < 0.05 * init {
            let secs = start.elapsed().as_secs_f64();
            return check(
                secs < 120.0,
                format!("L_actions {init:.4} -> {la:.5} after {step} steps, {secs:.1}s (limit 120s)"),
            );
        }
        t.optimizer.step(t.model.store_mut(), &grads).map_err(fail)?;
        let m = t.model.config().momentum_at(step, 2000);
        if let AnyModel::Chunk(cm) = &mut t.model {
            cm.ema_update(m).map_err(fail)?;
        }
    }
    Err(format!(
        "L_actions {:.4} -> {last:.5} after 2000 steps",
        initial.unwrap_or(f64::NAN)
    ))
}

// ---------------------------------------------------------------------------
// 6-9. Trained policies on the standard suite

struct Suite {
    dataset: Dataset,
    models: Vec<(ModelKind, u64, AnyModel)>,
    train_time: Duration,
}

fn train_suite() -> actjepa::Result<Suite> {
    let start = Instant::now();
    let dataset = standard_dataset()?;
    let tasks = TaskSpec::suite();
    let select_seeds: Vec<u64> = (0..5).map(|i| 20_000 + i).collect();
    let select = |m: &AnyModel| success_fraction(m, &tasks, &select_seeds);
    let mut models = Vec::new();
    for kind in [ModelKind::ActJepa, ModelKind::Act, ModelKind::Rbc] {
        for seed in 0..TRAIN_SEEDS {
            let t0 = Instant::now();
            let t = train_joint(&dataset, &suite_model(), suite_train(kind, seed), Some(&select))?;
            eprintln!(
                "  trained {} seed {seed} in {:.0}s (selected epoch {:?}, selection success {:?})",
                kind.name(),
                t0.elapsed().as_secs_f64(),
                t.progress.best_epoch,
                t.progress.best_success
            );
            models.push((kind, seed, t.best_model().clone()));
        }
    }
    Ok(Suite {
        dataset,
        models,
        train_time: start.elapsed(),
    })
}

fn c6_success(suite: &Suite) -> Outcome {
    let start = Instant::now();
    let entries: Vec<EvalEntry> = suite
        .models
        .iter()
        .map(|(k, s, m)| EvalEntry {
            model: k.name().into(),
            train_seed: *s,
            source: m,
        })
        .collect();
    let table = evaluate_success(&entries, &TaskSpec::suite(), &eval_seeds(EVAL_SEEDS)).map_err(fail)?;
    let aggs = table.aggregates();
    let rate = |name: &str| aggs.iter().find(|a| a.model == name).map(|a| a.mean).unwrap_or(f64::NAN);
    let (jepa, act, rbc) = (rate("actjepa"), rate("act"), rate("rbc"));
    let secs = (suite.train_time + start.elapsed()).as_secs_f64();
    let shown: Vec<String> = aggs.iter().map(|a| format!("{} {}", a.model, a.display())).collect();
    check(
        table.rows.len() == 270 && jepa >= act - 10.0 && jepa >= rbc + 20.0 && act >= rbc + 20.0,
        format!(
            "{} over {} rollouts; need actjepa >= act - 10 and both >= rbc + 20; {secs:.0}s (target 1800s)",
            shown.join(", "),
            table.rows.len()
        ),
    )
}

fn seed0(suite: &Suite, kind: ModelKind) -> Result<&ChunkModel<f32>, String> {
    let (_, _, m) = suite
        .models
        .iter()
        .find(|(k, s, _)| *k == kind && *s == 0)
        .ok_or("missing model")?;
    m.as_chunk().map_err(fail)
}

fn c7_probe(suite: &Suite) -> Outcome {
    let cfg = ProbeConfig::default();
    let ds = &suite.dataset;
    let mut untrained = ChunkModel::<f32>::init(&suite_model(), ModelKind::ActJepa, 0).map_err(fail)?;
    untrained.norm = ds.norm().clone();
    let jepa = probe_seeds("actjepa", seed0(suite, ModelKind::ActJepa)?, ds, &PROBE_SEEDS, &cfg).map_err(fail)?;
    let act = probe_seeds("act", seed0(suite, ModelKind::Act)?, ds, &PROBE_SEEDS, &cfg).map_err(fail)?;
    let base = probe_seeds("untrained", &untrained, ds, &PROBE_SEEDS, &cfg).map_err(fail)?;
    let frozen = [&jepa, &act, &base]
        .iter()
        .all(|r| r.runs.iter().all(|p| p.encoder_hash_before == p.encoder_hash_after));
    let (jr, ja) = (jepa.rmse_mean_std().0, jepa.ate_mean_std().0);
    let (ar, aa) = (act.rmse_mean_std().0, act.ate_mean_std().0);
    let (br, ba) = (base.rmse_mean_std().0, base.ate_mean_std().0);
    check(
        frozen && jr < ar && ja < aa && jr < br && ja < ba && ar < br && aa < ba,
        format!(
            "RMSE/ATE x100: actjepa {:.3}/{:.3}, act {:.3}/{:.3}, untrained {:.3}/{:.3} over {} probe seeds",
            100.0 * jr,
            100.0 * ja,
            100.0 * ar,
            100.0 * aa,
            100.0 * br,
            100.0 * ba,
            PROBE_SEEDS.len()
        ),
    )
}

fn c8_alternation(ds: &Dataset) -> Outcome {
    let start = Instant::now();
    let pretrain = TrainConfig {
        model: ModelKind::ActJepa,
        batch_size: 8,
        steps_per_epoch: Some(200),
        ..TrainConfig::default()
    };
    let finetune = TrainConfig {
        epochs: 2,
        ..pretrain.clone()
    };
    let cfg = AlternateConfig {
        pretrain: pretrain.clone(),
        finetune: finetune.clone(),
        rounds: ALTERNATE_ROUNDS,
        freeze_encoder: true,
    };
    let curve = alternate(ds, &suite_model(), &cfg).map_err(fail)?;
    let losses = curve.losses();
    let epochs: Vec<f64> = (1..=losses.len()).map(|e| e as f64).collect();
    let rho = spearman(&epochs, &losses);

    let mut random = ChunkModel::<f32>::init(&suite_model(), ModelKind::ActJepa, 1_000).map_err(fail)?;
    random.norm = ds.norm().clone();
    let ft = TrainConfig {
        seed: finetune_seed(pretrain.seed),
        ..finetune
    };
    let last_round = ALTERNATE_ROUNDS - 1;
    let baseline = finetune_actions(random, ds, ft, true, decoder_seed(pretrain.seed, last_round)).map_err(fail)?;
    let (first, last) = (losses[0], losses[losses.len() - 1]);
    check(
        losses.len() >= 10 && last < first && rho < 0.0 && last < baseline.final_loss,
        format!(
            "fine-tune loss {first:.4} -> {last:.4} over {} rounds, Spearman {rho:.3}, random encoder {:.4}; {:.0}s",
            losses.len(),
            baseline.final_loss,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c9_collapse(suite: &Suite) -> Outcome {
    let m = seed0(suite, ModelKind::ActJepa)?;
    let d = m.config.d_model;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for task in TaskSpec::suite() {
        for seed in 1_000..1_004 {
            let ep = collect_expert_episode(&task, seed).map_err(fail)?;
            for t in (0..ep.len() - 8).step_by(8) {
                let seq: Vec<[f64; PROPRIO_DIM]> = (t + 1..=t + 8)
                    .map(|i| m.norm.normalize_proprio(&ep.observations[i].proprio))
                    .collect();
                let y: Tensor<f32> = m.encode_targets(&seq).map_err(fail)?;
                for r in 0..y.rows() {
                    rows.push(y.row(r).iter().map(|v| *v as f64).collect());
                }
            }
        }
    }
    let stds: Vec<f64> = (0..d)
        .map(|j| mean_std(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()).1)
        .collect();
    let min_std = stds.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = mean_std(&stds).0;
    check(
        min_std > 1e-3,
        format!(
            "per-dimension std over {} held-out target embeddings: min {min_std:.4}, mean {mean:.4}",
            rows.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Environment replay and reference policies

fn c10_replay() -> Outcome {
    let mut bitwise = true;
    for task in TaskSpec::suite() {
        for seed in 0..DEMOS_PER_TASK {
            let rec = collect_expert_episode(&task, seed).map_err(fail)?;
            let mut p = ReplayPolicy::new(rec.actions.clone(), 8);
            let ep = run_episode_until(&task, seed, &mut p, task.episode_len, false).map_err(fail)?;
            bitwise &= ep.trajectory == rec;
        }
    }
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
    let t = evaluate_success(&entries, &TaskSpec::suite(), &eval_seeds(EVAL_SEEDS)).map_err(fail)?;
    let aggs = t.aggregates();
    check(
        bitwise && aggs[0].mean == 100.0 && aggs[1].mean == 0.0,
        format!(
            "replay bitwise over {} demos: {bitwise}; expert {}, null {}",
            3 * DEMOS_PER_TASK,
            aggs[0].display(),
            aggs[1].display()
        ),
    )
}

// ---------------------------------------------------------------------------

const NAMES: [&str; 10] = [
    "full-model gradient check",
    "EMA target update",
    "query-token budget",
    "determinism, round trips, resume",
    "overfit four chunks",
    "standard-suite success",
    "representation probe",
    "alternation curve",
    "target embedding spread",
    "replay and reference policies",
];

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACTJEPA_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let strict = std::env::var("ACTJEPA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |i: usize, f: &dyn Fn() -> Outcome| {
        if wanted(i) {
            let t = Instant::now();
            let r = f();
            eprintln!("  criterion {i} took {:.1}s", t.elapsed().as_secs_f64());
            print_line(i, &r);
            results.push((i, r));
        }
    };
    run(1, &c1_grad_check);
    run(2, &c2_ema);
    run(3, &c3_tokens);
    run(4, &c4_determinism);
    run(5, &c5_overfit);
    if (6..=9).any(wanted) {
        match train_suite() {
            Ok(suite) => {
                run(6, &|| c6_success(&suite));
                run(7, &|| c7_probe(&suite));
                run(8, &|| c8_alternation(&suite.dataset));
                run(9, &|| c9_collapse(&suite));
            }
            Err(e) => {
                let msg = format!("training the suite failed: {e}");
                for i in 6..=9 {
                    run(i, &|| Err(msg.clone()));
                }
            }
        }
    }
    run(10, &c10_replay);

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, r)| r.is_err())
        .map(|(i, _)| i.to_string())
        .collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({})", failed.join(", "))
        }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}

fn print_line(i: usize, r: &Outcome) {
    let (tag, detail) = match r {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {i:>2} {}: {detail}", NAMES[i - 1]);
}
