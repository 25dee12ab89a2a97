//! Joint training, latent-only pretraining, action fine-tuning and the
//! pretrain/fine-tune alternation experiment.

use std::fmt::Write as _;
use std::sync::OnceLock;

use diffcore::{AdamConfig, AdamW, Graph, ParamGrads, ParamId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::AnyModel;
use crate::datastore::{shuffled_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{param_hash, ActionLoss, ChunkModel, LossValues, ModelConfig, ModelKind, Objective};

pub const THREADS_ENV: &str = "ACTJEPA_THREADS";

/// Worker pool sized by `ACTJEPA_THREADS` (rayon's default when unset).
pub fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
    })
}

/// SplitMix64 over `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_EPOCH: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_FINETUNE: u64 = 3;

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, STREAM_EPOCH, epoch as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps optimizer steps per epoch; a full pass when unset.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub action_loss: ActionLoss,
    pub targets_include_current: bool,
    /// Write a loss row every this many optimizer steps.
    pub log_every: usize,
    /// Evaluate the policy for best-checkpoint selection every this many
    /// epochs; 0 keeps the final model.
    pub select_every: usize,
    pub select_seeds: usize,
    pub select_seed_base: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::ActJepa,
            epochs: 30,
            batch_size: 32,
            steps_per_epoch: None,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            action_loss: ActionLoss::L1,
            targets_include_current: false,
            log_every: 1,
            select_every: 0,
            select_seeds: 5,
            select_seed_base: 20_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        self.adam().validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One loss-log row; absent terms are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub actions: Option<f64>,
    pub observations: Option<f64>,
    pub total: f64,
}

/// Tab-separated header for a log whose rows carry the given terms.
pub fn log_header(actions: bool, observations: bool) -> String {
    let mut h = String::from("epoch\tstep");
    if actions {
        h.push_str("\tL_actions");
    }
    if observations {
        h.push_str("\tL_observations");
    }
    h.push_str("\tL\n");
    h
}

pub fn log_lines(rows: &[LossRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = write!(out, "{}\t{}", r.epoch, r.step);
        if let Some(a) = r.actions {
            let _ = write!(out, "\t{a}");
        }
        if let Some(o) = r.observations {
            let _ = write!(out, "\t{o}");
        }
        let _ = writeln!(out, "\t{}", r.total);
    }
    out
}

/// Progress that must survive a restart.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    pub global_step: u64,
    pub best_success: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_actions: Option<f64>,
    pub mean_observations: Option<f64>,
    pub mean_total: f64,
    pub selection: Option<f64>,
    pub improved: bool,
}

pub type Selector<'a> = &'a (dyn Fn(&AnyModel) -> Result<f64> + Sync);

/// Training state for any model kind and objective.
pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub config: TrainConfig,
    pub model: AnyModel,
    pub optimizer: AdamW<f32>,
    pub objective: Objective,
    pub progress: Progress,
    pub log: Vec<LossRow>,
    pub best: Option<AnyModel>,
}

impl<'a> Trainer<'a> {
    /// Fresh model seeded by `config.seed`, optimizing every trainable
    /// parameter on the kind's default objective.
    pub fn new(dataset: &'a Dataset, model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        let mut model = AnyModel::init(model_config, config.model, config.seed)?;
        model.set_norm(dataset.norm().clone());
        let objective = default_objective(config.model);
        let ids = model.trainable_ids();
        Self::with_model(dataset, model, config, objective, ids)
    }

    pub fn with_model(
        dataset: &'a Dataset,
        model: AnyModel,
        config: TrainConfig,
        objective: Objective,
        ids: Vec<ParamId>,
    ) -> Result<Self> {
        config.validate()?;
        check_compatible(dataset, &model)?;
        let optimizer = AdamW::new(config.adam(), model.store(), ids)?;
        Ok(Self {
            dataset,
            config,
            model,
            optimizer,
            objective,
            progress: Progress::default(),
            log: Vec::new(),
            best: None,
        })
    }

    /// Continues a run saved at an epoch boundary.
    pub fn resume(
        dataset: &'a Dataset,
        model: AnyModel,
        optimizer: AdamW<f32>,
        config: TrainConfig,
        progress: Progress,
    ) -> Result<Self> {
        config.validate()?;
        check_compatible(dataset, &model)?;
        let objective = default_objective(model.kind());
        Ok(Self {
            dataset,
            config,
            model,
            optimizer,
            objective,
            progress,
            log: Vec::new(),
            best: None,
        })
    }

    fn units(&self) -> Vec<(usize, usize)> {
        match &self.model {
            AnyModel::Chunk(m) => self.dataset.chunk_starts(m.config.chunk_size),
            AnyModel::Rbc(_) => crate::baselines::RbcModel::<f32>::units(self.dataset),
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        let full = self.units().len().div_ceil(self.config.batch_size);
        self.config.steps_per_epoch.map_or(full, |cap| cap.min(full))
    }

    fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.epochs) as u64
    }

    fn unit_loss(&self, g: &mut Graph<f32>, unit: (usize, usize)) -> Result<crate::model::LossNodes> {
        match &self.model {
            AnyModel::Chunk(m) => {
                let sample = self.dataset.chunk_at(
                    unit.0,
                    unit.1,
                    m.config.chunk_size,
                    self.config.targets_include_current,
                )?;
                m.sample_loss(g, &sample, self.objective, self.config.action_loss)
            }
            AnyModel::Rbc(m) => m.window_loss(g, self.dataset, unit.0, unit.1),
        }
    }

    /// Batch-mean loss and gradient. Per-sample work may run in parallel;
    /// the reduction is a fixed-order sum so results do not depend on the
    /// thread count.
    pub fn batch_gradient(&self, batch: &[(usize, usize)]) -> Result<(LossValues, ParamGrads<f32>)> {
        let store = self.model.store();
        let per: Vec<Result<(LossValues, ParamGrads<f32>)>> = pool().install(|| {
            batch
                .par_iter()
                .map(|&u| {
                    let mut g = Graph::new();
                    let l = self.unit_loss(&mut g, u)?;
                    let vals = l.values(&g);
                    let grads = g.backward(l.total)?.param_grads(&g, store);
                    Ok((vals, grads))
                })
                .collect()
        });
        let mut acc = ParamGrads::zeros_like(store);
        let mut sum = LossValues {
            total: 0.0,
            actions: None,
            observations: None,
        };
        for r in per {
            let (v, g) = r?;
            acc.accumulate(&g);
            sum.total += v.total;
            sum.actions = add_opt(sum.actions, v.actions);
            sum.observations = add_opt(sum.observations, v.observations);
        }
        let b = batch.len() as f64;
        acc.scale(1.0 / b as f32);
        sum.total /= b;
        sum.actions = sum.actions.map(|v| v / b);
        sum.observations = sum.observations.map(|v| v / b);
        Ok((sum, acc))
    }

    /// Header of the loss log written by this trainer.
    pub fn log_header(&self) -> String {
        log_header(self.objective != Objective::ObservationsOnly, self.uses_ema())
    }

    fn uses_ema(&self) -> bool {
        self.objective != Objective::ActionsOnly && self.model.kind() == ModelKind::ActJepa
    }

    /// One pass over the shuffled units (capped by `steps_per_epoch`),
    /// followed by best-checkpoint selection when due.
    pub fn run_epoch(&mut self, selector: Option<Selector>) -> Result<EpochSummary> {
        let epoch = self.progress.epochs_done;
        let mut batches = shuffled_batches(
            self.units(),
            self.config.batch_size,
            epoch_seed(self.config.seed, epoch),
        );
        batches.truncate(self.steps_per_epoch());
        let total_steps = self.total_steps();
        let mut sums = (0.0, None, None);
        for batch in &batches {
            let (loss, grads) = self.batch_gradient(batch)?;
            if !loss.total.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: self.progress.global_step as usize,
                    loss: loss.total,
                });
            }
            self.optimizer.step(self.model.store_mut(), &grads)?;
            if self.uses_ema() {
                let m = self
                    .model
                    .config()
                    .momentum_at(self.progress.global_step, total_steps);
                if let AnyModel::Chunk(cm) = &mut self.model {
                    cm.ema_update(m)?;
                }
            }
            self.progress.global_step += 1;
            if self.progress.global_step % self.config.log_every as u64 == 0 {
                self.log.push(LossRow {
                    epoch,
                    step: self.progress.global_step,
                    actions: loss.actions,
                    observations: loss.observations,
                    total: loss.total,
                });
            }
            sums.0 += loss.total;
            sums.1 = add_opt(sums.1, loss.actions);
            sums.2 = add_opt(sums.2, loss.observations);
        }
        self.progress.epochs_done += 1;
        let n = batches.len().max(1) as f64;
        let mut summary = EpochSummary {
            epoch,
            steps: batches.len(),
            mean_actions: sums.1.map(|v| v / n),
            mean_observations: sums.2.map(|v| v / n),
            mean_total: sums.0 / n,
            selection: None,
            improved: false,
        };
        let due = self.config.select_every > 0
            && (self.progress.epochs_done % self.config.select_every == 0
                || self.progress.epochs_done == self.config.epochs);
        if let (Some(select), true) = (selector, due) {
            let rate = select(&self.model)?;
            summary.selection = Some(rate);
            if self.progress.best_success.is_none_or(|b| rate > b) {
                self.progress.best_success = Some(rate);
                self.progress.best_epoch = Some(epoch);
                self.best = Some(self.model.clone());
                summary.improved = true;
            }
        }
        Ok(summary)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, selector: Option<Selector>) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while self.progress.epochs_done < self.config.epochs {
            out.push(self.run_epoch(selector)?);
        }
        Ok(out)
    }

    /// The selected model, or the current one when no selection ran.
    pub fn best_model(&self) -> &AnyModel {
        self.best.as_ref().unwrap_or(&self.model)
    }
}

fn add_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x + y),
        (None, y) => y,
        (x, None) => x,
    }
}

fn default_objective(kind: ModelKind) -> Objective {
    match kind {
        ModelKind::ActJepa => Objective::Joint,
        _ => Objective::ActionsOnly,
    }
}

fn check_compatible(ds: &Dataset, model: &AnyModel) -> Result<()> {
    let cfg = model.config();
    if ds.image_dims() != (cfg.image_height, cfg.image_width) {
        return Err(Error::Dim(format!(
            "dataset images {:?}, model expects {}x{}",
            ds.image_dims(),
            cfg.image_height,
            cfg.image_width
        )));
    }
    if let Some(t) = ds.manifest.tasks.iter().find(|t| t.task_id >= cfg.num_tasks) {
        return Err(Error::Dim(format!(
            "task `{}` id {} exceeds model task count {}",
            t.task, t.task_id, cfg.num_tasks
        )));
    }
    Ok(())
}

/// Joint training from scratch: both losses, EMA after every step.
pub fn train_joint<'a>(
    dataset: &'a Dataset,
    model_config: &ModelConfig,
    config: TrainConfig,
    selector: Option<Selector>,
) -> Result<Trainer<'a>> {
    let mut t = Trainer::new(dataset, model_config, config)?;
    t.run(selector)?;
    Ok(t)
}

/// Latent-only pretraining: optimizes encoder and predictor on the
/// observation loss; the decoder is never read or written.
pub fn pretrainer<'a>(
    dataset: &'a Dataset,
    model: ChunkModel<f32>,
    config: TrainConfig,
) -> Result<Trainer<'a>> {
    if model.kind != ModelKind::ActJepa {
        return Err(Error::ModelKind {
            found: model.kind.name().into(),
            expected: "actjepa".into(),
        });
    }
    let mut ids = model.encoder_ids();
    ids.extend(model.predictor_ids());
    Trainer::with_model(dataset, AnyModel::Chunk(model), config, Objective::ObservationsOnly, ids)
}

pub fn pretrain_jepa(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: TrainConfig,
) -> Result<(ChunkModel<f32>, Vec<LossRow>)> {
    let mut model = ChunkModel::init(model_config, ModelKind::ActJepa, config.seed)?;
    model.norm = dataset.norm().clone();
    let mut t = pretrainer(dataset, model, config)?;
    t.run(None)?;
    let log = std::mem::take(&mut t.log);
    Ok((t.model.into_chunk()?, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub model: ChunkModel<f32>,
    /// Mean action loss over the final epoch.
    pub final_loss: f64,
    pub log: Vec<LossRow>,
}

/// Fresh decoder drawn from `decoder_seed`, trained on the action loss for
/// `config.epochs` epochs. The encoder is updated unless frozen.
pub fn finetune_actions(
    mut model: ChunkModel<f32>,
    dataset: &Dataset,
    config: TrainConfig,
    freeze_encoder: bool,
    decoder_seed: u64,
) -> Result<FinetuneResult> {
    model.decoder.reinit(&mut model.store, decoder_seed);
    let mut ids = model.decoder_ids();
    if !freeze_encoder {
        ids.extend(model.encoder_ids());
    }
    let mut t = Trainer::with_model(dataset, AnyModel::Chunk(model), config, Objective::ActionsOnly, ids)?;
    let summaries = t.run(None)?;
    let final_loss = summaries
        .last()
        .and_then(|s| s.mean_actions)
        .ok_or(Error::EmptyDataset)?;
    let log = std::mem::take(&mut t.log);
    Ok(FinetuneResult {
        model: t.model.into_chunk()?,
        final_loss,
        log,
    })
}

/// Shuffling seed of every fine-tuning run in an alternation.
pub fn finetune_seed(seed: u64) -> u64 {
    derive_seed(seed, STREAM_FINETUNE, 0)
}

pub fn decoder_seed(seed: u64, round: usize) -> u64 {
    derive_seed(seed, STREAM_DECODER, round as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub pretrain_epoch: usize,
    pub finetune_action_loss: f64,
    pub pretrain_observation_loss: f64,
    /// Encoder hash of the pretraining lineage after this round.
    pub encoder_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlternationCurve {
    pub points: Vec<CurvePoint>,
}

impl AlternationCurve {
    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.finetune_action_loss).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlternateConfig {
    pub pretrain: TrainConfig,
    /// Fine-tuning run per round; `epochs` is the fine-tune length.
    pub finetune: TrainConfig,
    pub rounds: usize,
    pub freeze_encoder: bool,
}

/// Alternates one pretraining epoch with a throwaway fine-tuning run on a
/// copy of the model. Fine-tuned copies are discarded, so the pretraining
/// lineage never sees them; this is checked by hashing the lineage's
/// parameters around every fine-tune.
pub fn alternate(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &AlternateConfig,
) -> Result<AlternationCurve> {
    if config.rounds < 2 {
        return Err(Error::Config("alternation needs at least 2 rounds".into()));
    }
    let mut pre_cfg = config.pretrain.clone();
    pre_cfg.epochs = config.rounds;
    let mut model = ChunkModel::init(model_config, ModelKind::ActJepa, pre_cfg.seed)?;
    model.norm = dataset.norm().clone();
    let mut t = pretrainer(dataset, model, pre_cfg)?;
    let mut points = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let summary = t.run_epoch(None)?;
        let lineage = t.model.as_chunk()?;
        let all: Vec<ParamId> = lineage.store.ids().collect();
        let before = param_hash(&lineage.store, &all);
        let mut ft_cfg = config.finetune.clone();
        ft_cfg.seed = finetune_seed(config.pretrain.seed);
        let ft = finetune_actions(
            lineage.clone(),
            dataset,
            ft_cfg,
            config.freeze_encoder,
            decoder_seed(config.pretrain.seed, round),
        )?;
        let lineage = t.model.as_chunk()?;
        let after = param_hash(&lineage.store, &all);
        if before != after {
            return Err(Error::Integrity(format!(
                "fine-tuning round {round} modified the pretraining lineage"
            )));
        }
        points.push(CurvePoint {
            pretrain_epoch: round + 1,
            finetune_action_loss: ft.final_loss,
            pretrain_observation_loss: summary.mean_observations.unwrap_or(f64::NAN),
            encoder_hash: param_hash(&lineage.store, &lineage.encoder_ids()),
        });
    }
    Ok(AlternationCurve { points })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
