use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use actjepa::baselines::AnyModel;
use actjepa::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use actjepa::datastore::{load_dataset, save_dataset, Dataset};
use actjepa::evalkit::{
    eval_seeds, eval_summary_csv, evaluate_success, probe_seeds, success_fraction, write_report,
    EvalEntry, EvalTable, ProbeReport, ReportTables,
};
use actjepa::model::ModelKind;
use actjepa::simenv::{collect_expert_episode, TaskSpec};
use actjepa::trainer::{self, log_lines, AlternateConfig, AlternationCurve, Trainer};
use actjepa::{Error, Result};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.resolved";
pub const LAST_CKPT: &str = "checkpoints/last.ckpt";
pub const BEST_CKPT: &str = "checkpoints/best.ckpt";
pub const MODEL_CKPT: &str = "checkpoints/model.ckpt";
pub const LOSS_LOG: &str = "logs/loss.tsv";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io(path))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

fn tasks_by_name(names: &[&str]) -> Result<Vec<TaskSpec>> {
    names
        .iter()
        .map(|n| TaskSpec::by_name(n).ok_or_else(|| Error::Config(format!("unknown task `{n}`"))))
        .collect()
}

pub fn collect(tasks: &[&str], episodes: usize, seed: u64, chunk_size: usize, out: &Path) -> Result<Dataset> {
    if episodes == 0 || chunk_size == 0 {
        return Err(Error::Config("episodes and chunk size must be positive".into()));
    }
    let mut eps = Vec::new();
    for task in tasks_by_name(tasks)? {
        for i in 0..episodes as u64 {
            eps.push(collect_expert_episode(&task, seed + i)?);
        }
    }
    let ds = Dataset::new(eps, chunk_size, seed)?;
    save_dataset(&ds, out)?;
    eprintln!("collected {} successful episodes into {}", ds.episodes.len(), out.display());
    Ok(ds)
}

fn dataset_for(cfg: &mut RunConfig, data: &Path) -> Result<Dataset> {
    cfg.data.dir = Some(data.display().to_string());
    let ds = load_dataset(data)?;
    if ds.chunk_size() != cfg.model.chunk_size {
        return Err(Error::Config(format!(
            "dataset chunk size {} differs from model.chunk_size {}",
            ds.chunk_size(),
            cfg.model.chunk_size
        )));
    }
    Ok(ds)
}

pub struct TrainOptions {
    pub kind: ModelKind,
    pub train_seed: u64,
    pub resume: bool,
    pub stop_after: Option<usize>,
}

pub fn run_dir_name(kind: ModelKind, seed: u64) -> String {
    format!("{}_seed{seed}", kind.name())
}

/// Trains into `out/<model>_seed<S>/`, checkpointing every epoch so an
/// interrupted run resumes to the same result. Returns the run directory.
pub fn train(mut cfg: RunConfig, data: &Path, out: &Path, opts: &TrainOptions) -> Result<PathBuf> {
    cfg.train.model = opts.kind;
    cfg.train.seed = opts.train_seed;
    let ds = dataset_for(&mut cfg, data)?;
    cfg.validate()?;
    let resolved = cfg.to_toml()?;
    let dir = out.join(run_dir_name(opts.kind, opts.train_seed));
    let config_path = dir.join(CONFIG_FILE);
    let log_path = dir.join(LOSS_LOG);

    let mut t = if opts.resume {
        let stored = fs::read_to_string(&config_path).map_err(io(&config_path))?;
        if stored != resolved {
            return Err(Error::Config(format!(
                "configuration differs from the one stored in {}",
                config_path.display()
            )));
        }
        let ck = load_checkpoint(&dir.join(LAST_CKPT), Some(opts.kind))?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Integrity("last checkpoint has no optimizer state".into()))?;
        let train_cfg = ck
            .train
            .ok_or_else(|| Error::Integrity("last checkpoint has no training config".into()))?;
        if train_cfg != cfg.train {
            return Err(Error::Integrity("last checkpoint was written by another config".into()));
        }
        let mut t = Trainer::resume(&ds, ck.model, optimizer, train_cfg, ck.progress)?;
        let best = dir.join(BEST_CKPT);
        if best.exists() {
            t.best = Some(load_checkpoint(&best, Some(opts.kind))?.model);
        }
        trim_log(&log_path, t.progress.epochs_done)?;
        t
    } else {
        if config_path.exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume to continue it",
                dir.display()
            )));
        }
        for sub in ["checkpoints", "logs", "reports"] {
            mkdir(&dir.join(sub))?;
        }
        write(&config_path, &resolved)?;
        let t = Trainer::new(&ds, &cfg.model, cfg.train.clone())?;
        write(&log_path, &t.log_header())?;
        t
    };

    let select_tasks = cfg.eval.task_specs()?;
    let select_seeds: Vec<u64> =
        (0..cfg.train.select_seeds as u64).map(|i| cfg.train.select_seed_base + i).collect();
    let select = |m: &AnyModel| success_fraction(m, &select_tasks, &select_seeds);
    let selector: Option<trainer::Selector> = (cfg.train.select_every > 0).then_some(&select);

    while t.progress.epochs_done < t.config.epochs
        && opts.stop_after.is_none_or(|n| t.progress.epochs_done < n)
    {
        let s = t.run_epoch(selector)?;
        append(&log_path, &log_lines(&t.log))?;
        t.log.clear();
        save_checkpoint(
            &Checkpoint {
                model: t.model.clone(),
                optimizer: Some(t.optimizer.clone()),
                train: Some(t.config.clone()),
                progress: t.progress.clone(),
            },
            &dir.join(LAST_CKPT),
        )?;
        if s.improved {
            save_checkpoint(&final_checkpoint(&t, t.model.clone()), &dir.join(BEST_CKPT))?;
        }
        eprintln!(
            "{} epoch {} loss {:.5}{}",
            dir.display(),
            s.epoch,
            s.mean_total,
            s.selection.map(|v| format!(" success {v:.2}")).unwrap_or_default()
        );
    }
    if t.progress.epochs_done == t.config.epochs {
        save_checkpoint(&final_checkpoint(&t, t.best_model().clone()), &dir.join(MODEL_CKPT))?;
    }
    Ok(dir)
}

fn final_checkpoint(t: &Trainer, model: AnyModel) -> Checkpoint {
    Checkpoint {
        model,
        optimizer: None,
        train: Some(t.config.clone()),
        progress: t.progress.clone(),
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(io(path))?;
    f.write_all(text.as_bytes()).map_err(io(path))
}

/// Drops log rows from epochs the last checkpoint does not cover.
fn trim_log(path: &Path, epochs_done: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut lines = text.lines();
    let mut kept = String::new();
    if let Some(h) = lines.next() {
        kept.push_str(h);
        kept.push('\n');
    }
    for line in lines {
        let epoch: usize = line
            .split('\t')
            .next()
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| Error::Integrity(format!("malformed log row `{line}` in {}", path.display())))?;
        if epoch < epochs_done {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write(path, &kept)
}

pub fn alternate(mut cfg: RunConfig, data: &Path, epochs: usize, out: &Path) -> Result<AlternationCurve> {
    let ds = dataset_for(&mut cfg, data)?;
    cfg.train.model = ModelKind::ActJepa;
    cfg.train.epochs = epochs;
    cfg.validate()?;
    let finetune = trainer::TrainConfig {
        epochs: cfg.alternate.finetune_epochs,
        ..cfg.train.clone()
    };
    let alt = AlternateConfig {
        pretrain: cfg.train.clone(),
        finetune,
        rounds: epochs,
        freeze_encoder: cfg.alternate.freeze_encoder,
    };
    let curve = trainer::alternate(&ds, &cfg.model, &alt)?;
    mkdir(out)?;
    write(&out.join(CONFIG_FILE), &cfg.to_toml()?)?;
    write_report(
        &ReportTables {
            curve: Some(&curve),
            ..Default::default()
        },
        out,
    )?;
    for p in &curve.points {
        eprintln!("pretrain epoch {} fine-tune loss {:.5}", p.pretrain_epoch, p.finetune_action_loss);
    }
    Ok(curve)
}

pub fn probe(cfg: &RunConfig, checkpoint: &Path, data: &Path, seeds: usize, out: &Path) -> Result<ProbeReport> {
    if seeds == 0 {
        return Err(Error::Config("--probe-seeds must be positive".into()));
    }
    let ck = load_checkpoint(checkpoint, None)?;
    let model = ck.model.as_chunk()?;
    let ds = load_dataset(data)?;
    let seeds: Vec<u64> = (0..seeds as u64).collect();
    let report = probe_seeds(model.kind.name(), model, &ds, &seeds, &cfg.probe)?;
    mkdir(out)?;
    write_report(
        &ReportTables {
            probes: Some(std::slice::from_ref(&report)),
            ..Default::default()
        },
        out,
    )?;
    for r in &report.runs {
        eprintln!(
            "probe seed {} rmse {:.5} ate {:.5} encoder {} -> {}",
            r.probe_seed, r.rmse, r.ate, r.encoder_hash_before, r.encoder_hash_after
        );
    }
    Ok(report)
}

pub fn eval(pattern: &str, seeds: usize, tasks: &[&str], out: &Path) -> Result<EvalTable> {
    if seeds == 0 {
        return Err(Error::Config("--eval-seeds must be positive".into()));
    }
    let paths = glob::glob(pattern).map_err(|e| Error::Config(format!("bad glob `{pattern}`: {e}")))?;
    let mut paths: Vec<PathBuf> = paths
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("glob `{pattern}`: {e}")))?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no checkpoints match `{pattern}`")));
    }
    let checkpoints = paths
        .iter()
        .map(|p| load_checkpoint(p, None))
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<EvalEntry> = checkpoints
        .iter()
        .map(|ck| EvalEntry {
            model: ck.model.kind().name().to_string(),
            train_seed: ck.train.as_ref().map_or(0, |t| t.seed),
            source: &ck.model,
        })
        .collect();
    let table = evaluate_success(&entries, &tasks_by_name(tasks)?, &eval_seeds(seeds))?;
    write_report(
        &ReportTables {
            eval: Some(&table),
            ..Default::default()
        },
        out,
    )?;
    print!("{}", eval_summary_csv(&table));
    Ok(table)
}

pub fn repro(cfg: RunConfig, out: &Path, episodes: usize, alternate_epochs: usize) -> Result<()> {
    let data = out.join("data");
    collect(&["reach", "push", "pickplace"], episodes, 0, cfg.model.chunk_size, &data)?;
    let runs = out.join("runs");
    for kind in [ModelKind::ActJepa, ModelKind::Act, ModelKind::Rbc] {
        for seed in 0..3 {
            let opts = TrainOptions {
                kind,
                train_seed: seed,
                resume: false,
                stop_after: None,
            };
            train(cfg.clone(), &data, &runs, &opts)?;
        }
    }
    let pattern = format!("{}/*/{MODEL_CKPT}", glob::Pattern::escape(&runs.display().to_string()));
    eval(&pattern, cfg.eval.seeds, &["reach", "push", "pickplace"], &out.join("eval"))?;
    for kind in [ModelKind::ActJepa, ModelKind::Act] {
        let ck = runs.join(run_dir_name(kind, 0)).join(MODEL_CKPT);
        probe(&cfg, &ck, &data, 3, &out.join("probe").join(kind.name()))?;
    }
    alternate(cfg, &data, alternate_epochs, &out.join("alternate"))?;
    crate::report::report(out, &out.join("report"))
}
