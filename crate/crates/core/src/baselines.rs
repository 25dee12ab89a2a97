//! Supervised comparison policies: the action-chunking autoencoder (the main
//! model without its latent branch) and a causal next-action regressor.

use std::collections::VecDeque;

use diffcore::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datastore::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::model::{
    sinusoidal_1d, ActionLoss, Block, Builder, ChunkModel, ContextInput, Init, Linear,
    LossNodes, ModelConfig, ModelKind, Norm,
};
use crate::simenv::{ActionVector, Observation, Policy, WorldState, ACTION_DIM, PROPRIO_DIM};

/// Action chunk of the autoencoder baseline: the shared encoder followed by
/// the shared decoder.
pub fn act_forward<T: Real>(model: &ChunkModel<T>, g: &mut Graph<T>, input: &ContextInput) -> Result<NodeId> {
    let s_x = model.encode_context(g, input)?;
    model.decode_actions(g, s_x)
}

pub fn act_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, target: NodeId, kind: ActionLoss) -> Result<NodeId> {
    Ok(match kind {
        ActionLoss::L1 => g.l1_loss(pred, target)?,
        ActionLoss::L2 => g.l2_loss(pred, target)?,
    })
}

/// One step of RBC history: an observation and, except for the newest
/// step, the normalized action taken after it.
#[derive(Clone, Debug)]
pub struct HistoryStep<'a> {
    pub obs: &'a Observation,
    pub action: Option<[f64; ACTION_DIM]>,
}

/// Causal transformer over interleaved observation and action tokens
/// `o_1, a_1, ..., o_k`. Every observation position predicts the action
/// taken at that step.
#[derive(Clone, Debug, PartialEq)]
pub struct RbcModel<T> {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub store: ParamStore<T>,
    pub image: Linear,
    pub proprio: Linear,
    pub task: ParamId,
    pub action: Linear,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub head: Linear,
}

impl<T: Real> RbcModel<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let pixels = config.image_height * config.image_width;
        let lin = |b: &mut Builder<T>, name: &str, i: usize, o: usize| -> Result<Linear> {
            Ok(Linear {
                w: b.add(format!("rbc.{name}.w"), &[i, o], Init::Xavier)?,
                b: b.add(format!("rbc.{name}.b"), &[o], Init::Zeros)?,
            })
        };
        let image = lin(&mut b, "image", pixels, d)?;
        let proprio = lin(&mut b, "proprio", PROPRIO_DIM, d)?;
        let task = b.add("rbc.task".into(), &[config.num_tasks, d], Init::Xavier)?;
        let action = lin(&mut b, "action", ACTION_DIM, d)?;
        let layers = config.encoder_layers + config.decoder_layers;
        let blocks = (0..layers)
            .map(|i| Block::build(&mut b, &format!("rbc.block{i}"), config))
            .collect::<Result<_>>()?;
        let ln_f = Norm {
            g: b.add("rbc.ln_f.g".into(), &[d], Init::Ones)?,
            b: b.add("rbc.ln_f.b".into(), &[d], Init::Zeros)?,
        };
        let head = lin(&mut b, "head", d, ACTION_DIM)?;
        Ok(Self {
            config: config.clone(),
            norm: NormStats::identity(),
            store,
            image,
            proprio,
            task,
            action,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    fn obs_token(&self, g: &mut Graph<T>, obs: &Observation) -> Result<NodeId> {
        let s = &self.store;
        let cfg = &self.config;
        if obs.image.height != cfg.image_height || obs.image.width != cfg.image_width {
            return Err(Error::Dim(format!(
                "image {}x{}, model expects {}x{}",
                obs.image.height, obs.image.width, cfg.image_height, cfg.image_width
            )));
        }
        if obs.task_id >= cfg.num_tasks {
            return Err(Error::Dim(format!("task id {} out of range", obs.task_id)));
        }
        let px = g.constant(Tensor::new(
            vec![1, obs.image.pixels.len()],
            obs.image.pixels.iter().map(|&p| T::from_f64(p as f64)).collect(),
        )?);
        let img = self.image.apply(g, s, px)?;
        let p = self.norm.normalize_proprio(&obs.proprio);
        let p = g.constant(Tensor::from_fn(&[1, PROPRIO_DIM], |i| T::from_f64(p[i])));
        let p = self.proprio.apply(g, s, p)?;
        let onehot = g.constant(Tensor::from_fn(&[1, cfg.num_tasks], |i| {
            if i == obs.task_id {
                T::one()
            } else {
                T::zero()
            }
        }));
        let emb = g.param(s, self.task);
        let task = g.matmul(onehot, emb)?;
        let x = g.add(img, p)?;
        Ok(g.add(x, task)?)
    }

    /// Predictions `[k, 3]` (normalized) at every observation position of
    /// the last `h` steps of `history`.
    pub fn forward(&self, g: &mut Graph<T>, history: &[HistoryStep]) -> Result<NodeId> {
        if history.is_empty() {
            return Err(Error::Sampling("empty RBC history".into()));
        }
        let h = self.config.history;
        let window = &history[history.len().saturating_sub(h)..];
        let mut tokens = Vec::with_capacity(2 * window.len());
        let mut obs_rows = Vec::with_capacity(window.len());
        for (i, step) in window.iter().enumerate() {
            obs_rows.push(tokens.len());
            tokens.push(self.obs_token(g, step.obs)?);
            let last = i + 1 == window.len();
            match (step.action, last) {
                (Some(a), false) => {
                    let a = g.constant(Tensor::from_fn(&[1, ACTION_DIM], |j| T::from_f64(a[j])));
                    tokens.push(self.action.apply(g, &self.store, a)?);
                }
                (None, false) => {
                    return Err(Error::Sampling(
                        "only the newest history step may omit its action".into(),
                    ))
                }
                _ => {}
            }
        }
        let len = tokens.len();
        let x = g.concat_rows(&tokens)?;
        let d = self.config.d_model;
        let table = sinusoidal_1d(len, d);
        let pe = g.constant(Tensor::from_fn(&[len, d], |i| T::from_f64(table[i])));
        let mut x = g.add(x, pe)?;
        for blk in &self.blocks {
            x = blk.apply(g, &self.store, x, None, self.config.n_heads, true)?;
        }
        let x = self.ln_f.apply(g, &self.store, x)?;
        let x = g.select_rows(x, &obs_rows)?;
        self.head.apply(g, &self.store, x)
    }

    /// Next action (denormalized) from the newest history step.
    pub fn rbc_forward(&self, history: &[HistoryStep]) -> Result<[f64; ACTION_DIM]> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, history)?;
        let v = g.value(out);
        let last = v.row(v.rows() - 1);
        let a = [last[0].as_f64(), last[1].as_f64(), last[2].as_f64()];
        Ok(self.norm.denormalize_action(&a))
    }

    /// Training loss on the window of episode `e` that ends at step `t`:
    /// squared error at every observation position.
    pub fn window_loss(&self, g: &mut Graph<T>, ds: &Dataset, e: usize, t: usize) -> Result<LossNodes> {
        let ep = &ds.episodes[e];
        let start = (t + 1).saturating_sub(self.config.history);
        let norm = ds.norm();
        let acts: Vec<[f64; ACTION_DIM]> = (start..=t)
            .map(|i| norm.normalize_action(&ep.actions[i].0))
            .collect();
        let history: Vec<HistoryStep> = (start..=t)
            .map(|i| HistoryStep {
                obs: &ep.observations[i],
                action: (i < t).then(|| acts[i - start]),
            })
            .collect();
        let pred = self.forward(g, &history)?;
        let flat: Vec<f64> = acts.iter().flatten().copied().collect();
        let target = g.constant(Tensor::from_fn(&[acts.len(), ACTION_DIM], |i| {
            T::from_f64(flat[i])
        }));
        let loss = g.l2_loss(pred, target)?;
        Ok(LossNodes {
            total: loss,
            actions: Some(loss),
            observations: None,
        })
    }

    /// Every `(episode, t)` window end.
    pub fn units(ds: &Dataset) -> Vec<(usize, usize)> {
        ds.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
            .collect()
    }
}

/// Per-step closed-loop RBC controller with a rolling history buffer.
pub struct RbcPolicy<'a> {
    model: &'a RbcModel<f32>,
    buffer: VecDeque<(Observation, [f64; ACTION_DIM])>,
}

impl<'a> RbcPolicy<'a> {
    pub fn new(model: &'a RbcModel<f32>) -> Self {
        Self {
            model,
            buffer: VecDeque::new(),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }
}

impl Policy for RbcPolicy<'_> {
    fn plan(&mut self, obs: &Observation, _world: &WorldState) -> Result<Vec<ActionVector>> {
        let mut history: Vec<HistoryStep> = self
            .buffer
            .iter()
            .map(|(o, a)| HistoryStep {
                obs: o,
                action: Some(*a),
            })
            .collect();
        history.push(HistoryStep { obs, action: None });
        let raw = self.model.rbc_forward(&history)?;
        let action = ActionVector(raw).clipped();
        let keep = self.model.config.history.saturating_sub(1);
        self.buffer
            .push_back((obs.clone(), self.model.norm.normalize_action(&action.0)));
        while self.buffer.len() > keep {
            self.buffer.pop_front();
        }
        Ok(vec![action])
    }

    fn reset(&mut self) {
        self.buffer.clear();
    }
}

/// Model kinds share one training entry point through this wrapper.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Chunk(ChunkModel<f32>),
    Rbc(RbcModel<f32>),
}

impl AnyModel {
    pub fn init(config: &ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Rbc => AnyModel::Rbc(RbcModel::init(config, seed)?),
            k => AnyModel::Chunk(ChunkModel::init(config, k, seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Chunk(m) => m.kind,
            AnyModel::Rbc(_) => ModelKind::Rbc,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Chunk(m) => &m.config,
            AnyModel::Rbc(m) => &m.config,
        }
    }

    pub fn norm(&self) -> &NormStats {
        match self {
            AnyModel::Chunk(m) => &m.norm,
            AnyModel::Rbc(m) => &m.norm,
        }
    }

    pub fn set_norm(&mut self, norm: NormStats) {
        match self {
            AnyModel::Chunk(m) => m.norm = norm,
            AnyModel::Rbc(m) => m.norm = norm,
        }
    }

    pub fn store(&self) -> &ParamStore<f32> {
        match self {
            AnyModel::Chunk(m) => &m.store,
            AnyModel::Rbc(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            AnyModel::Chunk(m) => &mut m.store,
            AnyModel::Rbc(m) => &mut m.store,
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        match self {
            AnyModel::Chunk(m) => m.trainable_ids(),
            AnyModel::Rbc(m) => m.trainable_ids(),
        }
    }

    pub fn as_chunk(&self) -> Result<&ChunkModel<f32>> {
        match self {
            AnyModel::Chunk(m) => Ok(m),
            AnyModel::Rbc(_) => Err(Error::ModelKind {
                found: "rbc".into(),
                expected: "actjepa or act".into(),
            }),
        }
    }

    pub fn into_chunk(self) -> Result<ChunkModel<f32>> {
        match self {
            AnyModel::Chunk(m) => Ok(m),
            AnyModel::Rbc(_) => Err(Error::ModelKind {
                found: "rbc".into(),
                expected: "actjepa or act".into(),
            }),
        }
    }

    /// Controller for closed-loop rollouts.
    pub fn policy(&self) -> Box<dyn Policy + '_> {
        match self {
            AnyModel::Chunk(m) => Box::new(ChunkPolicy { model: m }),
            AnyModel::Rbc(m) => Box::new(RbcPolicy::new(m)),
        }
    }
}

/// Executes each predicted chunk open-loop.
pub struct ChunkPolicy<'a> {
    pub model: &'a ChunkModel<f32>,
}

impl Policy for ChunkPolicy<'_> {
    fn plan(&mut self, obs: &Observation, _world: &WorldState) -> Result<Vec<ActionVector>> {
        Ok(self
            .model
            .act(obs)?
            .into_iter()
            .map(|a| ActionVector(a).clipped())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{reset, TaskSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            history: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn rbc_left_truncates_history() {
        let m = RbcModel::<f64>::init(&tiny(), 0).unwrap();
        let task = TaskSpec::by_name("reach").unwrap();
        let obs: Vec<_> = (0..6).map(|s| reset(&task, s).1).collect();
        let hist: Vec<HistoryStep> = obs
            .iter()
            .enumerate()
            .map(|(i, o)| HistoryStep {
                obs: o,
                action: (i < 5).then_some([0.1 * i as f64, 0.0, -1.0]),
            })
            .collect();
        let full = m.rbc_forward(&hist).unwrap();
        let cut = m.rbc_forward(&hist[2..]).unwrap();
        assert_eq!(full, cut);
        assert!(m.rbc_forward(&[]).is_err());
    }
}
