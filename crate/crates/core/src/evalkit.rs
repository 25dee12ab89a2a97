//! Rollouts, success tables, frozen-encoder probing and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use diffcore::{AdamW, Graph, ParamGrads, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::AnyModel;
use crate::datastore::{shuffled_batches, write_file, Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::model::{param_hash, Builder, ChunkHead, ChunkModel};
use crate::simenv::{
    run_episode, ExpertPolicy, NullPolicy, Policy, TaskSpec, PROPRIO_DIM,
};
use crate::trainer::{derive_seed, pool, AlternationCurve};

pub const EVAL_SEED_BASE: u64 = 10_000;
pub const HELD_OUT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    pub success: bool,
    pub steps: usize,
    pub queries: usize,
}

pub fn rollout(
    task: &TaskSpec,
    seed: u64,
    policy: &mut dyn Policy,
    max_steps: usize,
) -> Result<RolloutResult> {
    let ep = run_episode(task, seed, policy, max_steps)?;
    Ok(RolloutResult {
        success: ep.trajectory.success,
        steps: ep.steps,
        queries: ep.queries,
        trajectory: ep.trajectory,
    })
}

/// Closed-loop rollout of a chunked model: every `n` steps it observes,
/// decodes a chunk, denormalizes it and executes it open-loop.
pub fn rollout_chunked(
    task: &TaskSpec,
    seed: u64,
    model: &ChunkModel<f32>,
    max_steps: usize,
) -> Result<RolloutResult> {
    if task.id >= model.config.num_tasks {
        return Err(Error::Dim(format!("task id {} outside model", task.id)));
    }
    let mut p = crate::baselines::ChunkPolicy { model };
    rollout(task, seed, &mut p, max_steps)
}

/// Something that can produce a fresh controller per rollout.
pub trait PolicySource: Sync {
    fn make(&self) -> Box<dyn Policy + '_>;
}

impl PolicySource for AnyModel {
    fn make(&self) -> Box<dyn Policy + '_> {
        self.policy()
    }
}

/// The scripted expert as a policy source (it reads the privileged state).
pub struct ExpertSource;

impl PolicySource for ExpertSource {
    fn make(&self) -> Box<dyn Policy + '_> {
        Box::new(TaskExpert)
    }
}

struct TaskExpert;

impl Policy for TaskExpert {
    fn plan(
        &mut self,
        obs: &crate::simenv::Observation,
        world: &crate::simenv::WorldState,
    ) -> Result<Vec<crate::simenv::ActionVector>> {
        let task = TaskSpec::by_id(obs.task_id)
            .ok_or_else(|| Error::Dim(format!("unknown task id {}", obs.task_id)))?;
        ExpertPolicy { task }.plan(obs, world)
    }
}

pub struct NullSource;

impl PolicySource for NullSource {
    fn make(&self) -> Box<dyn Policy + '_> {
        Box::new(NullPolicy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub task: String,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub success: bool,
    pub steps: usize,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub model: String,
    /// Success percentage per train seed, in first-seen order.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn display(&self) -> String {
        format!("{:.1} ± {:.1}", self.mean, self.std)
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalTable {
    /// Success rate per model: percentage per train seed, then mean ± std
    /// across train seeds. Depends only on the set of rows.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut models: Vec<String> = Vec::new();
        for r in &self.rows {
            if !models.contains(&r.model) {
                models.push(r.model.clone());
            }
        }
        models
            .into_iter()
            .map(|m| {
                let mut seeds: Vec<u64> = self
                    .rows
                    .iter()
                    .filter(|r| r.model == m)
                    .map(|r| r.train_seed)
                    .collect();
                seeds.sort_unstable();
                seeds.dedup();
                let per_seed: Vec<(u64, f64)> = seeds
                    .iter()
                    .map(|&s| {
                        let rows: Vec<_> = self
                            .rows
                            .iter()
                            .filter(|r| r.model == m && r.train_seed == s)
                            .collect();
                        let ok = rows.iter().filter(|r| r.success).count();
                        (s, 100.0 * ok as f64 / rows.len() as f64)
                    })
                    .collect();
                let rates: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
                let (mean, std) = mean_std(&rates);
                Aggregate {
                    model: m,
                    per_seed,
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn success_rate(&self) -> f64 {
        let ok = self.rows.iter().filter(|r| r.success).count();
        ok as f64 / self.rows.len().max(1) as f64
    }
}

/// One labeled policy per train seed.
pub struct EvalEntry<'a> {
    pub model: String,
    pub train_seed: u64,
    pub source: &'a dyn PolicySource,
}

/// Full Cartesian evaluation `entries x tasks x eval_seeds`. Rollouts may
/// run in parallel; rows come back in the serial order.
pub fn evaluate_success(
    entries: &[EvalEntry],
    tasks: &[TaskSpec],
    eval_seeds: &[u64],
) -> Result<EvalTable> {
    let mut jobs = Vec::new();
    for (ei, _) in entries.iter().enumerate() {
        for task in tasks {
            for &s in eval_seeds {
                jobs.push((ei, *task, s));
            }
        }
    }
    let rows: Vec<Result<EvalRow>> = pool().install(|| {
        jobs.par_iter()
            .map(|&(ei, task, seed)| {
                let e = &entries[ei];
                let mut p = e.source.make();
                let r = rollout(&task, seed, p.as_mut(), task.episode_len)?;
                Ok(EvalRow {
                    model: e.model.clone(),
                    task: task.name().to_string(),
                    train_seed: e.train_seed,
                    eval_seed: seed,
                    success: r.success,
                    steps: r.steps,
                    queries: r.queries,
                })
            })
            .collect()
    });
    Ok(EvalTable {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

pub fn eval_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| EVAL_SEED_BASE + i).collect()
}

/// Success fraction of one model on the suite over the given seeds.
pub fn success_fraction(model: &AnyModel, tasks: &[TaskSpec], seeds: &[u64]) -> Result<f64> {
    let entry = EvalEntry {
        model: model.kind().name().into(),
        train_seed: 0,
        source: model,
    };
    Ok(evaluate_success(&[entry], tasks, seeds)?.success_rate())
}

// ---------------------------------------------------------------------------
// Metrics

fn check_shapes(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<()> {
    if pred.len() != truth.len()
        || pred.is_empty()
        || pred.iter().zip(truth).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Dim("metric inputs must have equal, non-empty shapes".into()));
    }
    Ok(())
}

/// `sqrt(mean((pred - truth)^2))` over every element.
pub fn rmse(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    check_shapes(pred, truth)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in pred.iter().zip(truth) {
        for (x, y) in a.iter().zip(b) {
            sum += (x - y).powi(2);
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}

/// Mean over timesteps of the Euclidean distance between rows, without
/// any trajectory alignment.
pub fn ate(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    check_shapes(pred, truth)?;
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / pred.len() as f64)
}

// ---------------------------------------------------------------------------
// Probing

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub held_out_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            held_out_fraction: HELD_OUT_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub probe_seed: u64,
    pub rmse: f64,
    pub ate: f64,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub model: String,
    pub runs: Vec<ProbeRun>,
}

impl ProbeReport {
    pub fn rmse_mean_std(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.rmse).collect::<Vec<_>>())
    }

    pub fn ate_mean_std(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.ate).collect::<Vec<_>>())
    }
}

struct ProbeData {
    contexts: Vec<Tensor<f32>>,
    /// Normalized future proprio per chunk, row-major `[n * 4]`.
    targets: Vec<Vec<f64>>,
}

fn probe_data(model: &ChunkModel<f32>, ds: &Dataset) -> Result<ProbeData> {
    let n = model.config.chunk_size;
    let starts = ds.chunk_starts(n);
    let items: Vec<Result<(Tensor<f32>, Vec<f64>)>> = pool().install(|| {
        starts
            .par_iter()
            .map(|&(e, t)| {
                let ep = &ds.episodes[e];
                let s_x = model.context_tensor(&ep.observations[t])?;
                let target = (t + 1..t + 1 + n)
                    .flat_map(|i| model.norm.normalize_proprio(&ep.observations[i].proprio))
                    .collect();
                Ok((s_x, target))
            })
            .collect()
    });
    let mut out = ProbeData {
        contexts: Vec::with_capacity(items.len()),
        targets: Vec::with_capacity(items.len()),
    };
    for it in items {
        let (c, t) = it?;
        out.contexts.push(c);
        out.targets.push(t);
    }
    if out.contexts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Trains a fresh decoder-shaped head with a 4-dim output on frozen context
/// representations and scores it on held-out episodes in raw units.
pub fn probe_representation(
    model: &ChunkModel<f32>,
    dataset: &Dataset,
    probe_seed: u64,
    config: &ProbeConfig,
) -> Result<ProbeRun> {
    let enc_ids = model.encoder_ids();
    let before = param_hash(&model.store, &enc_ids);
    let (train, held) = dataset.split_by_seed(config.held_out_fraction);
    let train = probe_data(model, &train)?;
    let held = probe_data(model, &held)?;
    let cfg = &model.config;
    let n = cfg.chunk_size;

    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(probe_seed, 7, 0));
    let head = {
        let mut b = Builder::new(&mut store, &mut rng);
        ChunkHead::build(&mut b, "probe", cfg, cfg.decoder_layers, Some(PROPRIO_DIM))?
    };
    let mut opt = AdamW::new(
        diffcore::AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &store,
        head.ids(),
    )?;
    let forward = |g: &mut Graph<f32>, store: &ParamStore<f32>, ctx: &Tensor<f32>| {
        let s_x = g.constant(ctx.clone());
        head.forward(g, store, cfg, s_x, n)
    };
    for epoch in 0..config.epochs {
        let batches = shuffled_batches(
            (0..train.contexts.len()).collect(),
            config.batch_size,
            derive_seed(probe_seed, 8, epoch as u64),
        );
        for batch in batches {
            let per: Vec<Result<ParamGrads<f32>>> = pool().install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut g = Graph::new();
                        let pred = forward(&mut g, &store, &train.contexts[i])?;
                        let tgt = g.constant(Tensor::from_fn(&[n, PROPRIO_DIM], |k| {
                            train.targets[i][k] as f32
                        }));
                        let loss = g.l2_loss(pred, tgt)?;
                        Ok(g.backward(loss)?.param_grads(&g, &store))
                    })
                    .collect()
            });
            let mut acc = ParamGrads::zeros_like(&store);
            for g in per {
                acc.accumulate(&g?);
            }
            acc.scale(1.0 / batch.len() as f32);
            if !acc.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: opt.step_count() as usize,
                    loss: f64::NAN,
                });
            }
            opt.step(&mut store, &acc)?;
        }
    }

    let norm = &model.norm;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut ate_sum = 0.0;
    for (ctx, tgt) in held.contexts.iter().zip(&held.targets) {
        let mut g = Graph::inference();
        let out = forward(&mut g, &store, ctx)?;
        let v = g.value(out).to_f64_vec();
        let denorm = |row: &[f64]| -> Vec<f64> {
            norm.denormalize_proprio(&[row[0], row[1], row[2], row[3]]).to_vec()
        };
        let p: Vec<Vec<f64>> = v.chunks(PROPRIO_DIM).map(denorm).collect();
        let t: Vec<Vec<f64>> = tgt.chunks(PROPRIO_DIM).map(denorm).collect();
        ate_sum += ate(&p, &t)?;
        preds.extend(p);
        truths.extend(t);
    }
    let after = param_hash(&model.store, &enc_ids);
    if before != after {
        return Err(Error::Integrity("probe training modified the encoder".into()));
    }
    Ok(ProbeRun {
        probe_seed,
        rmse: rmse(&preds, &truths)?,
        ate: ate_sum / held.contexts.len() as f64,
        encoder_hash_before: before,
        encoder_hash_after: after,
    })
}

pub fn probe_seeds(
    label: &str,
    model: &ChunkModel<f32>,
    dataset: &Dataset,
    seeds: &[u64],
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let runs = seeds
        .iter()
        .map(|&s| probe_representation(model, dataset, s, config))
        .collect::<Result<_>>()?;
    Ok(ProbeReport {
        model: label.to_string(),
        runs,
    })
}

// ---------------------------------------------------------------------------
// Reports

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SUMMARY_CSV: &str = "eval_summary.csv";
pub const PROBE_CSV: &str = "probe.csv";
pub const CURVE_CSV: &str = "alternation.csv";
pub const CURVE_SVG: &str = "alternation.svg";

pub fn eval_csv(table: &EvalTable) -> String {
    let mut s = String::from("model,task,train_seed,eval_seed,success,steps,queries\n");
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.model, r.task, r.train_seed, r.eval_seed, r.success as u8, r.steps, r.queries
        );
    }
    s
}

pub fn eval_summary_csv(table: &EvalTable) -> String {
    let mut s = String::from("model,train_seeds,evaluations,success_mean,success_std,success\n");
    for a in table.aggregates() {
        let evals = table.rows.iter().filter(|r| r.model == a.model).count();
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{}",
            a.model,
            a.per_seed.len(),
            evals,
            a.mean,
            a.std,
            a.display()
        );
    }
    s
}

/// One row per probe seed plus a `mean ± std` aggregate row; metrics ×100.
pub fn probe_csv(reports: &[ProbeReport]) -> String {
    let mut s = String::from("model,probe_seed,rmse_x100,ate_x100,encoder_hash_before,encoder_hash_after\n");
    for rep in reports {
        for r in &rep.runs {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{},{}",
                rep.model,
                r.probe_seed,
                100.0 * r.rmse,
                100.0 * r.ate,
                r.encoder_hash_before,
                r.encoder_hash_after
            );
        }
        let (rm, rs) = rep.rmse_mean_std();
        let (am, as_) = rep.ate_mean_std();
        let _ = writeln!(
            s,
            "{},mean,{:.3} ± {:.3},{:.3} ± {:.3},,",
            rep.model,
            100.0 * rm,
            100.0 * rs,
            100.0 * am,
            100.0 * as_
        );
    }
    s
}

pub fn curve_csv(curve: &AlternationCurve) -> String {
    let mut s = String::from("pretrain_epoch,finetune_action_loss,pretrain_observation_loss,encoder_hash\n");
    for p in &curve.points {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            p.pretrain_epoch, p.finetune_action_loss, p.pretrain_observation_loss, p.encoder_hash
        );
    }
    s
}

/// Line plot with one circle per point.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m / 2.0,
        h - m
    );
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{m}" y2="{}" stroke="black"/>"#, m / 2.0, h - m);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        w / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    if !points.is_empty() {
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| {
            points.iter().map(sel).fold(init, f)
        };
        let (x0, x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
        let (y0, y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
        let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * (w - 1.5 * m);
        let sy = |y: f64| (h - m) - (y - y0) / (y1 - y0).max(1e-12) * (h - 1.5 * m);
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{m}" y="{}" font-size="10">{:.4}</text>"#,
            m / 2.0 - 4.0,
            y1
        );
        let _ = writeln!(s, r#"<text x="{m}" y="{}" font-size="10">{:.4}</text>"#, h - m + 14.0, y0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn curve_svg(curve: &AlternationCurve) -> String {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.pretrain_epoch as f64, p.finetune_action_loss))
        .collect();
    line_svg("Fine-tune action loss vs. pretraining epochs", "pretraining epoch", "action loss", &pts)
}

/// Tables handed to [`write_report`]; absent tables produce no files.
#[derive(Default)]
pub struct ReportTables<'a> {
    pub eval: Option<&'a EvalTable>,
    pub probes: Option<&'a [ProbeReport]>,
    pub curve: Option<&'a AlternationCurve>,
}

/// Writes CSVs (and the curve SVG); returns the file names written.
pub fn write_report(tables: &ReportTables, out_dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files: Vec<(&str, String)> = Vec::new();
    if let Some(t) = tables.eval {
        files.push((EVAL_CSV, eval_csv(t)));
        files.push((EVAL_SUMMARY_CSV, eval_summary_csv(t)));
    }
    if let Some(p) = tables.probes {
        files.push((PROBE_CSV, probe_csv(p)));
    }
    if let Some(c) = tables.curve {
        files.push((CURVE_CSV, curve_csv(c)));
        files.push((CURVE_SVG, curve_svg(c)));
    }
    let mut names = Vec::new();
    for (name, body) in files {
        write_file(&out_dir.join(name), body.as_bytes())?;
        names.push(name.to_string());
    }
    Ok(names)
}
