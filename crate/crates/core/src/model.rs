//! Context encoder, EMA target encoder, latent predictor and action decoder.

use diffcore::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datastore::{ChunkSample, NormStats};
use crate::error::{Error, Result};
use crate::simenv::{Image, Observation, ACTION_DIM, IMAGE_SIDE, PROPRIO_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    ActJepa,
    Act,
    Rbc,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ActJepa => "actjepa",
            ModelKind::Act => "act",
            ModelKind::Rbc => "rbc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "actjepa" => Some(ModelKind::ActJepa),
            "act" => Some(ModelKind::Act),
            "rbc" => Some(ModelKind::Rbc),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub predictor_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub chunk_size: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_tasks: usize,
    /// RBC history length in environment steps.
    pub history: usize,
    pub ema_momentum: f64,
    /// When set, momentum moves linearly from `ema_momentum` to this value
    /// over the run.
    pub ema_final: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            predictor_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            chunk_size: 8,
            patch_size: 6,
            image_height: IMAGE_SIDE,
            image_width: IMAGE_SIDE,
            num_tasks: 3,
            history: 8,
            ema_momentum: 0.99,
            ema_final: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be divisible by 4", self.d_model));
        }
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return bad(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.chunk_size == 0 || self.num_tasks == 0 || self.ffn_dim == 0 || self.history == 0 {
            return bad("chunk_size, num_tasks, ffn_dim and history must be positive".into());
        }
        check_momentum(self.ema_momentum)?;
        if let Some(m) = self.ema_final {
            check_momentum(m)?;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn context_tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size) + 2
    }

    /// Momentum for optimizer step `step` of `total` (0-based).
    pub fn momentum_at(&self, step: u64, total: u64) -> f64 {
        match self.ema_final {
            Some(end) if total > 1 => {
                let frac = (step as f64 / (total - 1) as f64).min(1.0);
                self.ema_momentum + (end - self.ema_momentum) * frac
            }
            _ => self.ema_momentum,
        }
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum {m} outside [0, 1]")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Positional encodings

/// Sinusoidal table `[len, d]`: even columns `sin(p / 10000^(i/d))`, odd
/// columns the matching cosine.
pub fn sinusoidal_1d(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for p in 0..len {
        for i in (0..d).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / d as f64);
            out[p * d + i] = (p as f64 * freq).sin();
            if i + 1 < d {
                out[p * d + i + 1] = (p as f64 * freq).cos();
            }
        }
    }
    out
}

/// Row-major grid table `[rows*cols, d]`; the first half of the features
/// encodes the row index, the second half the column index.
pub fn sinusoidal_2d(rows: usize, cols: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let r = sinusoidal_1d(rows, half);
    let c = sinusoidal_1d(cols, half);
    let mut out = vec![0.0; rows * cols * d];
    for i in 0..rows {
        for j in 0..cols {
            let dst = &mut out[(i * cols + j) * d..(i * cols + j + 1) * d];
            dst[..half].copy_from_slice(&r[i * half..(i + 1) * half]);
            dst[half..].copy_from_slice(&c[j * half..(j + 1) * half]);
        }
    }
    out
}

fn table<T: Real>(rows: usize, cols: usize, data: &[f64]) -> Tensor<T> {
    Tensor::from_fn(&[rows, cols], |i| T::from_f64(data[i]))
}

// ---------------------------------------------------------------------------
// Initialization

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
    /// Uniform with standard deviation 0.02.
    Small,
}

fn init_tensor<T: Real>(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Xavier => {
            let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
        Init::Small => {
            let a = 0.02 * 3f64.sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
    };
    Tensor::from_fn(shape, |i| T::from_f64(data[i]))
}

/// Adds parameters to a store and remembers how each was initialized, so a
/// module can later be re-drawn with a fresh generator.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub log: Vec<(ParamId, Init)>,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            log: Vec::new(),
        }
    }

    pub fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = init_tensor(init, shape, self.rng);
        let id = self.store.add(name, t)?;
        self.log.push((id, init));
        Ok(id)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.add(format!("{name}.w"), &[d_in, d_out], Init::Xavier)?,
            b: self.add(format!("{name}.b"), &[d_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.add(format!("{name}.g"), &[d], Init::Ones)?,
            b: self.add(format!("{name}.b"), &[d], Init::Zeros)?,
        })
    }
}

/// Re-draws the given parameters in order with their original schemes.
pub fn reinit<T: Real>(store: &mut ParamStore<T>, log: &[(ParamId, Init)], rng: &mut ChaCha8Rng) {
    for &(id, init) in log {
        let shape = store.get(id).shape().to_vec();
        store
            .set(id, init_tensor(init, &shape, rng))
            .expect("shape preserved");
    }
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(s, self.w), g.param(s, self.b));
        Ok(g.linear(x, w, b)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let (gamma, beta) = (g.param(s, self.g), g.param(s, self.b));
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attn {
    fn build<T: Real>(b: &mut Builder<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            q: b.linear(&format!("{name}.q"), d, d)?,
            k: b.linear(&format!("{name}.k"), d, d)?,
            v: b.linear(&format!("{name}.v"), d, d)?,
            o: b.linear(&format!("{name}.o"), d, d)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: NodeId,
        ctx: NodeId,
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let q = self.q.apply(g, s, x)?;
        let k = self.k.apply(g, s, ctx)?;
        let v = self.v.apply(g, s, ctx)?;
        let a = g.attention(q, k, v, heads, causal)?;
        self.o.apply(g, s, a)
    }
}

/// Pre-norm transformer block. With `cross` set, attention reads keys and
/// values from an external context instead of its own input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn build<T: Real>(b: &mut Builder<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: b.norm(&format!("{name}.ln1"), d)?,
            attn: Attn::build(b, &format!("{name}.attn"), d)?,
            ln2: b.norm(&format!("{name}.ln2"), d)?,
            ff1: b.linear(&format!("{name}.ff1"), d, cfg.ffn_dim)?,
            ff2: b.linear(&format!("{name}.ff2"), cfg.ffn_dim, d)?,
        })
    }

    /// `x + attn(ln(x), ctx)`, then `x + ffn(ln(x))`. Self-attention when
    /// `ctx` is `None`.
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: NodeId,
        ctx: Option<NodeId>,
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let h = self.ln1.apply(g, s, x)?;
        let a = self.attn.apply(g, s, h, ctx.unwrap_or(h), heads, causal)?;
        let x = g.add(x, a)?;
        let h = self.ln2.apply(g, s, x)?;
        let h = self.ff1.apply(g, s, h)?;
        let h = g.gelu(h);
        let h = self.ff2.apply(g, s, h)?;
        Ok(g.add(x, h)?)
    }
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub patch: Linear,
    pub proprio: Linear,
    pub task: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub ids: Vec<ParamId>,
}

impl Encoder {
    pub fn build<T: Real>(b: &mut Builder<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let start = b.log.len();
        let d = cfg.d_model;
        let p = cfg.patch_size;
        let patch = b.linear(&format!("{prefix}.patch"), p * p, d)?;
        let proprio = b.linear(&format!("{prefix}.proprio"), PROPRIO_DIM, d)?;
        let task = b.add(format!("{prefix}.task"), &[cfg.num_tasks, d], Init::Xavier)?;
        let blocks = (0..cfg.encoder_layers)
            .map(|i| Block::build(b, &format!("{prefix}.block{i}"), cfg))
            .collect::<Result<_>>()?;
        let ln_f = b.norm(&format!("{prefix}.ln_f"), d)?;
        let ids = b.log[start..].iter().map(|(id, _)| *id).collect();
        Ok(Self {
            patch,
            proprio,
            task,
            blocks,
            ln_f,
            ids,
        })
    }

    /// Bidirectional transformer stack plus final norm over given tokens.
    pub fn stack<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        cfg: &ModelConfig,
        mut x: NodeId,
    ) -> Result<NodeId> {
        for blk in &self.blocks {
            x = blk.apply(g, s, x, None, cfg.n_heads, false)?;
        }
        self.ln_f.apply(g, s, x)
    }
}

/// Splits an image into non-overlapping `p x p` patches, one row each, in
/// row-major patch order.
pub fn patch_matrix<T: Real>(image: &Image, p: usize) -> Result<Tensor<T>> {
    let (h, w) = (image.height, image.width);
    if p == 0 || h % p != 0 || w % p != 0 || image.pixels.len() != h * w {
        return Err(Error::Dim(format!("image {h}x{w} not divisible by patch {p}")));
    }
    let (gr, gc) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w);
    for pr in 0..gr {
        for pc in 0..gc {
            for r in 0..p {
                for c in 0..p {
                    data.push(T::from_f64(
                        image.pixels[(pr * p + r) * w + pc * p + c] as f64,
                    ));
                }
            }
        }
    }
    Ok(Tensor::new(vec![gr * gc, p * p], data)?)
}

/// Model inputs for one observation; proprio must already be normalized.
#[derive(Clone, Copy, Debug)]
pub struct ContextInput<'a> {
    pub image: &'a Image,
    pub proprio: [f64; PROPRIO_DIM],
    pub task_id: usize,
}

impl<'a> ContextInput<'a> {
    pub fn from_obs(obs: &'a Observation, norm: &NormStats) -> Self {
        Self {
            image: &obs.image,
            proprio: norm.normalize_proprio(&obs.proprio),
            task_id: obs.task_id,
        }
    }
}

pub fn patchify<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    enc: &Encoder,
    cfg: &ModelConfig,
    image: &Image,
) -> Result<NodeId> {
    let p = cfg.patch_size;
    let patches = patch_matrix::<T>(image, p)?;
    let (gr, gc) = (image.height / p, image.width / p);
    let x = g.constant(patches);
    let tok = enc.patch.apply(g, s, x)?;
    let pe = g.constant(table(gr * gc, cfg.d_model, &sinusoidal_2d(gr, gc, cfg.d_model)));
    Ok(g.add(tok, pe)?)
}

/// Token sequence `[patches..., proprio, task]` through the encoder stack.
pub fn encode_context<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    enc: &Encoder,
    cfg: &ModelConfig,
    input: &ContextInput,
) -> Result<NodeId> {
    if input.task_id >= cfg.num_tasks {
        return Err(Error::Dim(format!(
            "task id {} outside [0, {})",
            input.task_id, cfg.num_tasks
        )));
    }
    let patches = patchify(g, s, enc, cfg, input.image)?;
    let prop = g.constant(table(1, PROPRIO_DIM, &input.proprio));
    let prop = enc.proprio.apply(g, s, prop)?;
    let onehot = g.constant(Tensor::from_fn(&[1, cfg.num_tasks], |i| {
        if i == input.task_id {
            T::one()
        } else {
            T::zero()
        }
    }));
    let emb = g.param(s, enc.task);
    let task = g.matmul(onehot, emb)?;
    let x = g.concat_rows(&[patches, prop, task])?;
    enc.stack(g, s, cfg, x)
}

/// Projected proprio rows plus temporal encoding, before the stack.
pub fn target_tokens<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    enc: &Encoder,
    cfg: &ModelConfig,
    proprio_seq: &[[f64; PROPRIO_DIM]],
) -> Result<NodeId> {
    let n = proprio_seq.len();
    let flat: Vec<f64> = proprio_seq.iter().flatten().copied().collect();
    let x = g.constant(table(n, PROPRIO_DIM, &flat));
    let x = enc.proprio.apply(g, s, x)?;
    let pe = g.constant(table(n, cfg.d_model, &sinusoidal_1d(n, cfg.d_model)));
    Ok(g.add(x, pe)?)
}

// ---------------------------------------------------------------------------
// Predictor / decoder / probe head

/// Mask-token query head: `n` copies of one learnable token plus temporal
/// encodings cross-attend to the context, then self-attend among themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkHead {
    pub mask: ParamId,
    pub cross: Block,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub out: Option<Linear>,
    pub init_log: Vec<(ParamId, Init)>,
}

impl ChunkHead {
    pub fn build<T: Real>(
        b: &mut Builder<T>,
        prefix: &str,
        cfg: &ModelConfig,
        layers: usize,
        out_dim: Option<usize>,
    ) -> Result<Self> {
        let start = b.log.len();
        let d = cfg.d_model;
        let mask = b.add(format!("{prefix}.mask"), &[1, d], Init::Small)?;
        let cross = Block::build(b, &format!("{prefix}.cross"), cfg)?;
        let blocks = (0..layers)
            .map(|i| Block::build(b, &format!("{prefix}.block{i}"), cfg))
            .collect::<Result<_>>()?;
        let ln_f = b.norm(&format!("{prefix}.ln_f"), d)?;
        let out = match out_dim {
            Some(k) => Some(b.linear(&format!("{prefix}.head"), d, k)?),
            None => None,
        };
        Ok(Self {
            mask,
            cross,
            blocks,
            ln_f,
            out,
            init_log: b.log[start..].to_vec(),
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.init_log.iter().map(|(id, _)| *id).collect()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        cfg: &ModelConfig,
        s_x: NodeId,
        n: usize,
    ) -> Result<NodeId> {
        let m = g.param(s, self.mask);
        let q = g.repeat_rows(m, n)?;
        let pe = g.constant(table(n, cfg.d_model, &sinusoidal_1d(n, cfg.d_model)));
        let mut x = g.add(q, pe)?;
        x = self.cross.apply(g, s, x, Some(s_x), cfg.n_heads, false)?;
        for blk in &self.blocks {
            x = blk.apply(g, s, x, None, cfg.n_heads, false)?;
        }
        x = self.ln_f.apply(g, s, x)?;
        match &self.out {
            Some(head) => head.apply(g, s, x),
            None => Ok(x),
        }
    }

    pub fn reinit<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        reinit(store, &self.init_log, &mut rng);
    }
}

// ---------------------------------------------------------------------------
// Full model

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionLoss {
    L1,
    L2,
}

/// Which terms enter the scalar training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Joint,
    ActionsOnly,
    ObservationsOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub actions: Option<NodeId>,
    pub observations: Option<NodeId>,
}

/// Scalar loss values of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub actions: Option<f64>,
    pub observations: Option<f64>,
}

impl LossNodes {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossValues {
        LossValues {
            total: g.value(self.total).item().as_f64(),
            actions: self.actions.map(|n| g.value(n).item().as_f64()),
            observations: self.observations.map(|n| g.value(n).item().as_f64()),
        }
    }
}

/// Chunked policy: ACT-JEPA when `predictor` and `target` are present, the
/// plain action-chunking autoencoder otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkModel<T> {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub norm: NormStats,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: ChunkHead,
    pub predictor: Option<ChunkHead>,
    pub target: Option<Encoder>,
}

impl<T: Real> ChunkModel<T> {
    /// Parameters are created in a fixed order (encoder, decoder, then the
    /// predictor), so both kinds share encoder and decoder values for equal
    /// seeds. The target encoder is an exact copy of the context encoder.
    pub fn init(config: &ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        if kind == ModelKind::Rbc {
            return Err(Error::ModelKind {
                found: kind.name().into(),
                expected: "actjepa or act".into(),
            });
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = Encoder::build(&mut b, "enc", config)?;
        let decoder = ChunkHead::build(&mut b, "dec", config, config.decoder_layers, Some(ACTION_DIM))?;
        let (predictor, target) = if kind == ModelKind::ActJepa {
            let pred = ChunkHead::build(&mut b, "pred", config, config.predictor_layers, None)?;
            let tgt = Encoder::build(&mut b, "tgt", config)?;
            (Some(pred), Some(tgt))
        } else {
            (None, None)
        };
        let mut model = Self {
            kind,
            config: config.clone(),
            norm: NormStats::identity(),
            store,
            encoder,
            decoder,
            predictor,
            target,
        };
        model.copy_encoder_to_target();
        Ok(model)
    }

    fn copy_encoder_to_target(&mut self) {
        if let Some(tgt) = &self.target {
            for (&src, &dst) in self.encoder.ids.iter().zip(&tgt.ids) {
                let t = self.store.get(src).clone();
                self.store.set(dst, t).expect("congruent encoders");
            }
        }
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.ids.clone()
    }

    pub fn decoder_ids(&self) -> Vec<ParamId> {
        self.decoder.ids()
    }

    pub fn predictor_ids(&self) -> Vec<ParamId> {
        self.predictor.as_ref().map(|p| p.ids()).unwrap_or_default()
    }

    pub fn target_ids(&self) -> Vec<ParamId> {
        self.target.as_ref().map(|t| t.ids.clone()).unwrap_or_default()
    }

    /// Everything the optimizer may touch; never includes the target encoder.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_ids();
        ids.extend(self.decoder_ids());
        ids.extend(self.predictor_ids());
        ids
    }

    pub fn encode_context(&self, g: &mut Graph<T>, input: &ContextInput) -> Result<NodeId> {
        encode_context(g, &self.store, &self.encoder, &self.config, input)
    }

    /// Latent targets from the target encoder, computed without recording a
    /// graph so no gradient can reach the target parameters.
    pub fn encode_targets(&self, proprio_seq: &[[f64; PROPRIO_DIM]]) -> Result<Tensor<T>> {
        let tgt = self.target.as_ref().ok_or_else(|| Error::ModelKind {
            found: self.kind.name().into(),
            expected: "actjepa".into(),
        })?;
        if proprio_seq.len() != self.config.chunk_size {
            return Err(Error::Dim(format!(
                "target sequence has {} rows, expected {}",
                proprio_seq.len(),
                self.config.chunk_size
            )));
        }
        let mut g = Graph::inference();
        let x = target_tokens(&mut g, &self.store, tgt, &self.config, proprio_seq)?;
        let y = tgt.stack(&mut g, &self.store, &self.config, x)?;
        Ok(g.value(y).clone())
    }

    pub fn predict_abstract(&self, g: &mut Graph<T>, s_x: NodeId) -> Result<NodeId> {
        let pred = self.predictor.as_ref().ok_or_else(|| Error::ModelKind {
            found: self.kind.name().into(),
            expected: "actjepa".into(),
        })?;
        pred.forward(g, &self.store, &self.config, s_x, self.config.chunk_size)
    }

    pub fn decode_actions(&self, g: &mut Graph<T>, s_x: NodeId) -> Result<NodeId> {
        self.decoder
            .forward(g, &self.store, &self.config, s_x, self.config.chunk_size)
    }

    /// Builds the loss graph for one chunk sample.
    pub fn sample_loss(
        &self,
        g: &mut Graph<T>,
        sample: &ChunkSample,
        objective: Objective,
        action_loss: ActionLoss,
    ) -> Result<LossNodes> {
        let input = ContextInput::from_obs(&sample.context, &self.norm);
        let s_x = self.encode_context(g, &input)?;
        let actions = if objective != Objective::ObservationsOnly {
            let pred = self.decode_actions(g, s_x)?;
            let flat: Vec<f64> = sample.action_targets.iter().flatten().copied().collect();
            let target = g.constant(table(sample.action_targets.len(), ACTION_DIM, &flat));
            Some(match action_loss {
                ActionLoss::L1 => g.l1_loss(pred, target)?,
                ActionLoss::L2 => g.l2_loss(pred, target)?,
            })
        } else {
            None
        };
        let observations = if objective != Objective::ActionsOnly && self.kind == ModelKind::ActJepa
        {
            let s_y = self.encode_targets(&sample.obs_targets)?;
            let s_y = g.constant(s_y);
            let pred = self.predict_abstract(g, s_x)?;
            Some(g.l1_loss(pred, s_y)?)
        } else {
            None
        };
        let total = match (actions, observations) {
            (Some(a), Some(o)) => g.add(a, o)?,
            (Some(a), None) => a,
            (None, Some(o)) => o,
            (None, None) => {
                return Err(Error::Config(format!(
                    "objective {objective:?} has no terms for a `{}` model",
                    self.kind.name()
                )))
            }
        };
        Ok(LossNodes {
            total,
            actions,
            observations,
        })
    }

    /// `θ̄ ← m θ̄ + (1 − m) θ`, evaluated in double precision and rounded once.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        check_momentum(m)?;
        let Some(tgt) = &self.target else {
            return Ok(());
        };
        for (&src, &dst) in self.encoder.ids.iter().zip(&tgt.ids) {
            let theta = self.store.get(src).data().to_vec();
            for (t, th) in self.store.get_mut(dst).data_mut().iter_mut().zip(theta) {
                *t = T::from_f64(ema_value(m, t.as_f64(), th.as_f64()));
            }
        }
        Ok(())
    }

    /// Denormalized action chunk for one observation.
    pub fn act(&self, obs: &Observation) -> Result<Vec<[f64; ACTION_DIM]>> {
        let mut g = Graph::inference();
        let input = ContextInput::from_obs(obs, &self.norm);
        let s_x = self.encode_context(&mut g, &input)?;
        let a = self.decode_actions(&mut g, s_x)?;
        let v = g.value(a).to_f64_vec();
        Ok(v.chunks(ACTION_DIM)
            .map(|r| self.norm.denormalize_action(&[r[0], r[1], r[2]]))
            .collect())
    }

    /// Context representation as a plain tensor, for frozen-encoder use.
    pub fn context_tensor(&self, obs: &Observation) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let input = ContextInput::from_obs(obs, &self.norm);
        let s_x = self.encode_context(&mut g, &input)?;
        Ok(g.value(s_x).clone())
    }
}

/// `L_actions = mean|â − a|`, `L_observations = mean|ŝ_y − s_y|` and their
/// sum.
pub fn compute_losses<T: Real>(
    g: &mut Graph<T>,
    a_hat: NodeId,
    a: NodeId,
    s_hat: NodeId,
    s_y: NodeId,
) -> Result<LossNodes> {
    let actions = g.l1_loss(a_hat, a)?;
    let observations = g.l1_loss(s_hat, s_y)?;
    let total = g.add(actions, observations)?;
    Ok(LossNodes {
        total,
        actions: Some(actions),
        observations: Some(observations),
    })
}

pub fn ema_value(m: f64, target: f64, online: f64) -> f64 {
    m * target + (1.0 - m) * online
}

/// SHA-256 over the names, shapes and little-endian values of `ids`.
pub fn param_hash<T: Real>(store: &ParamStore<T>, ids: &[ParamId]) -> String {
    let mut h = Sha256::new();
    for &id in ids {
        h.update(store.name(id).as_bytes());
        for &d in store.get(id).shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in store.get(id).data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ModelConfig::default().context_tokens(), 18);
    }

    #[test]
    fn sinusoid_first_row() {
        let t = sinusoidal_1d(2, 4);
        assert_eq!(&t[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t[4] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn ema_hand_value() {
        let mut m = ChunkModel::<f32>::init(&tiny(), ModelKind::ActJepa, 0).unwrap();
        for id in m.encoder_ids() {
            let shape = m.store.get(id).shape().to_vec();
            m.store.set(id, Tensor::full(&shape, 1.0)).unwrap();
        }
        for id in m.target_ids() {
            let shape = m.store.get(id).shape().to_vec();
            m.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        m.ema_update(0.99).unwrap();
        for id in m.target_ids() {
            assert!(m.store.get(id).data().iter().all(|&v| v == 0.01f32));
        }
        assert!(m.ema_update(1.5).is_err());
    }

    #[test]
    fn momentum_schedule() {
        let cfg = ModelConfig {
            ema_final: Some(1.0),
            ..ModelConfig::default()
        };
        assert_eq!(cfg.momentum_at(0, 11), 0.99);
        assert_eq!(cfg.momentum_at(10, 11), 1.0);
        assert_eq!(ModelConfig::default().momentum_at(5, 11), 0.99);
    }
}

