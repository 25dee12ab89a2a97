//! Episode persistence, normalization statistics and chunk sampling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simenv::{ActionVector, Image, Observation, TaskSpec, ACTION_DIM, PROPRIO_DIM};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPISODES_DIR: &str = "episodes";
pub const STD_FLOOR: f64 = 1e-6;
const EPISODE_MAGIC: &[u8; 4] = b"AJEP";
const EPISODE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task_id: usize,
    pub seed: u64,
    pub observations: Vec<Observation>,
    pub actions: Vec<ActionVector>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.observations
            .first()
            .map(|o| (o.image.height, o.image.width))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub proprio_mean: [f64; PROPRIO_DIM],
    pub proprio_std: [f64; PROPRIO_DIM],
    pub action_mean: [f64; ACTION_DIM],
    pub action_std: [f64; ACTION_DIM],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            proprio_mean: [0.0; PROPRIO_DIM],
            proprio_std: [1.0; PROPRIO_DIM],
            action_mean: [0.0; ACTION_DIM],
            action_std: [1.0; ACTION_DIM],
        }
    }

    pub fn normalize_proprio(&self, p: &[f64; PROPRIO_DIM]) -> [f64; PROPRIO_DIM] {
        std::array::from_fn(|i| (p[i] - self.proprio_mean[i]) / self.proprio_std[i])
    }

    pub fn denormalize_proprio(&self, p: &[f64; PROPRIO_DIM]) -> [f64; PROPRIO_DIM] {
        std::array::from_fn(|i| p[i] * self.proprio_std[i] + self.proprio_mean[i])
    }

    pub fn normalize_action(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|i| (a[i] - self.action_mean[i]) / self.action_std[i])
    }

    pub fn denormalize_action(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|i| a[i] * self.action_std[i] + self.action_mean[i])
    }
}

fn mean_std<const D: usize>(rows: impl Iterator<Item = [f64; D]> + Clone) -> ([f64; D], [f64; D]) {
    let mut n = 0usize;
    let mut sum = [0.0; D];
    for r in rows.clone() {
        n += 1;
        for i in 0..D {
            sum[i] += r[i];
        }
    }
    let mean = sum.map(|s| s / n as f64);
    let mut var = [0.0; D];
    for r in rows {
        for i in 0..D {
            var[i] += (r[i] - mean[i]).powi(2);
        }
    }
    let std = var.map(|v| (v / n as f64).sqrt().max(STD_FLOOR));
    (mean, std)
}

/// Population mean and std over every timestep of every episode, std floored
/// at [`STD_FLOOR`].
pub fn compute_norm_stats(episodes: &[Trajectory]) -> Result<NormStats> {
    if episodes.iter().all(|e| e.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let obs = episodes
        .iter()
        .flat_map(|e| e.observations.iter().map(|o| o.proprio));
    let acts = episodes.iter().flat_map(|e| e.actions.iter().map(|a| a.0));
    let (proprio_mean, proprio_std) = mean_std(obs);
    let (action_mean, action_std) = mean_std(acts);
    Ok(NormStats {
        proprio_mean,
        proprio_std,
        action_mean,
        action_std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCount {
    pub task: String,
    pub task_id: usize,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub tasks: Vec<TaskCount>,
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub chunk_size: usize,
    pub norm_stats: NormStats,
    pub collection_seed: u64,
    /// Episode file names relative to the dataset root, in dataset order.
    pub episodes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Trajectory>,
}

impl Dataset {
    /// Builds a dataset whose stats are computed over all given episodes.
    pub fn new(episodes: Vec<Trajectory>, chunk_size: usize, collection_seed: u64) -> Result<Self> {
        let first = episodes.first().ok_or(Error::EmptyDataset)?;
        let (image_height, image_width) = first.image_dims().ok_or(Error::EmptyDataset)?;
        let mut tasks: Vec<TaskCount> = Vec::new();
        for e in &episodes {
            check_episode_dims(e, image_height, image_width)?;
            match tasks.iter_mut().find(|t| t.task_id == e.task_id) {
                Some(t) => t.episodes += 1,
                None => tasks.push(TaskCount {
                    task: task_name(e.task_id)?.to_string(),
                    task_id: e.task_id,
                    episodes: 1,
                }),
            }
        }
        tasks.sort_by_key(|t| t.task_id);
        let norm_stats = compute_norm_stats(&episodes)?;
        let names = episodes.iter().map(episode_file_name).collect::<Result<_>>()?;
        Ok(Self {
            manifest: DatasetManifest {
                version: FORMAT_VERSION.to_string(),
                tasks,
                proprio_dim: PROPRIO_DIM,
                action_dim: ACTION_DIM,
                image_height,
                image_width,
                chunk_size,
                norm_stats,
                collection_seed,
                episodes: names,
            },
            episodes,
        })
    }

    pub fn norm(&self) -> &NormStats {
        &self.manifest.norm_stats
    }

    pub fn chunk_size(&self) -> usize {
        self.manifest.chunk_size
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.manifest.image_height, self.manifest.image_width)
    }

    /// Splits into (train, held_out): the last `fraction` of episodes of each
    /// task, ordered by seed, are held out. Both halves keep this dataset's
    /// normalization stats.
    pub fn split_by_seed(&self, fraction: f64) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for t in &self.manifest.tasks {
            let mut eps: Vec<&Trajectory> =
                self.episodes.iter().filter(|e| e.task_id == t.task_id).collect();
            eps.sort_by_key(|e| e.seed);
            let n_held = ((eps.len() as f64) * fraction).round() as usize;
            let cut = eps.len() - n_held.min(eps.len());
            train.extend(eps[..cut].iter().map(|e| (*e).clone()));
            held.extend(eps[cut..].iter().map(|e| (*e).clone()));
        }
        (self.subset(train), self.subset(held))
    }

    fn subset(&self, episodes: Vec<Trajectory>) -> Dataset {
        let mut manifest = self.manifest.clone();
        for t in &mut manifest.tasks {
            t.episodes = episodes.iter().filter(|e| e.task_id == t.task_id).count();
        }
        manifest.episodes = episodes
            .iter()
            .map(|e| episode_file_name(e).expect("task ids validated at construction"))
            .collect();
        Dataset { manifest, episodes }
    }

    /// Every valid chunk start `(episode, t)` in dataset order.
    pub fn chunk_starts(&self, n: usize) -> Vec<(usize, usize)> {
        self.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len().saturating_sub(n)).map(move |t| (e, t)))
            .collect()
    }

    pub fn chunk_at(&self, episode: usize, t: usize, n: usize, include_current: bool) -> Result<ChunkSample> {
        let ep = &self.episodes[episode];
        if ep.len() < n + 1 || t + n > ep.len() - 1 {
            return Err(Error::Sampling(format!(
                "chunk t={t} n={n} does not fit episode of length {}",
                ep.len()
            )));
        }
        let norm = self.norm();
        let action_targets = (t..t + n).map(|i| norm.normalize_action(&ep.actions[i].0)).collect();
        let start = if include_current { t } else { t + 1 };
        let obs_targets = (start..start + n)
            .map(|i| norm.normalize_proprio(&ep.observations[i].proprio))
            .collect();
        Ok(ChunkSample {
            context: ep.observations[t].clone(),
            action_targets,
            obs_targets,
            task_id: ep.task_id,
            episode,
            t,
        })
    }
}

/// One training unit. Targets are normalized; the context observation is raw.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSample {
    pub context: Observation,
    pub action_targets: Vec<[f64; ACTION_DIM]>,
    pub obs_targets: Vec<[f64; PROPRIO_DIM]>,
    pub task_id: usize,
    pub episode: usize,
    pub t: usize,
}

/// Uniform episode, then uniform start in `[0, L-1-n]`.
pub fn sample_chunk(
    dataset: &Dataset,
    rng: &mut impl Rng,
    n: usize,
    include_current: bool,
) -> Result<ChunkSample> {
    if dataset.episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(short) = dataset.episodes.iter().find(|e| e.len() < n + 1) {
        return Err(Error::Sampling(format!(
            "episode {} seed {} has length {} < n+1 = {}",
            short.task_id,
            short.seed,
            short.len(),
            n + 1
        )));
    }
    let e = rng.gen_range(0..dataset.episodes.len());
    let t = rng.gen_range(0..dataset.episodes[e].len() - n);
    dataset.chunk_at(e, t, n, include_current)
}

/// Shuffles every valid start once with a generator seeded by `epoch_seed`
/// and cuts the order into batches (the last one may be short).
pub fn make_batches(
    dataset: &Dataset,
    n: usize,
    batch_size: usize,
    epoch_seed: u64,
) -> Vec<Vec<(usize, usize)>> {
    shuffled_batches(dataset.chunk_starts(n), batch_size, epoch_seed)
}

pub fn shuffled_batches<U: Clone>(mut units: Vec<U>, batch_size: usize, seed: u64) -> Vec<Vec<U>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);
    units.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn task_name(task_id: usize) -> Result<&'static str> {
    TaskSpec::by_id(task_id)
        .map(|t| t.name())
        .ok_or_else(|| Error::Dim(format!("unknown task id {task_id}")))
}

pub fn episode_file_name(e: &Trajectory) -> Result<String> {
    Ok(format!("{EPISODES_DIR}/ep_{}_{}.bin", task_name(e.task_id)?, e.seed))
}

fn check_episode_dims(e: &Trajectory, h: usize, w: usize) -> Result<()> {
    if e.observations.len() != e.actions.len() {
        return Err(Error::Dim(format!(
            "episode seed {}: {} observations vs {} actions",
            e.seed,
            e.observations.len(),
            e.actions.len()
        )));
    }
    for o in &e.observations {
        if o.image.height != h || o.image.width != w || o.image.pixels.len() != h * w {
            return Err(Error::Dim(format!(
                "episode seed {}: image {}x{} differs from {h}x{w}",
                e.seed, o.image.height, o.image.width
            )));
        }
        if o.task_id != e.task_id {
            return Err(Error::Dim(format!("episode seed {}: mixed task ids", e.seed)));
        }
    }
    Ok(())
}

/// Episode record, all integers and floats little-endian:
///
/// ```text
/// magic "AJEP" | u32 version | u32 task_id | u64 seed | u8 success
/// u32 length L | u32 proprio_dim | u32 action_dim | u32 height | u32 width
/// L * proprio_dim f64 | L * height * width f32 | L * action_dim f64
/// ```
pub fn encode_episode(e: &Trajectory) -> Result<Vec<u8>> {
    let (h, w) = e.image_dims().unwrap_or((0, 0));
    check_episode_dims(e, h, w)?;
    let l = e.len();
    let mut buf = Vec::with_capacity(41 + l * (PROPRIO_DIM * 8 + h * w * 4 + ACTION_DIM * 8));
    buf.extend_from_slice(EPISODE_MAGIC);
    buf.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(e.task_id as u32).to_le_bytes());
    buf.extend_from_slice(&e.seed.to_le_bytes());
    buf.push(e.success as u8);
    for v in [l, PROPRIO_DIM, ACTION_DIM, h, w] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for o in &e.observations {
        for v in o.proprio {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for o in &e.observations {
        for v in &o.image.pixels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for a in &e.actions {
        for v in a.0 {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!("{}: truncated", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_episode(bytes: &[u8], what: &str) -> Result<Trajectory> {
    let mut r = Reader { buf: bytes, pos: 0, what };
    if r.take(4)? != EPISODE_MAGIC {
        return Err(Error::Integrity(format!("{what}: bad magic")));
    }
    let version = r.u32()?;
    if version != EPISODE_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: EPISODE_VERSION.to_string(),
        });
    }
    let task_id = r.u32()? as usize;
    let seed = r.u64()?;
    let success = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Integrity(format!("{what}: success byte {b}"))),
    };
    let l = r.u32()? as usize;
    let pd = r.u32()? as usize;
    let ad = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if pd != PROPRIO_DIM || ad != ACTION_DIM {
        return Err(Error::Dim(format!(
            "{what}: dims proprio={pd} action={ad}, expected {PROPRIO_DIM}/{ACTION_DIM}"
        )));
    }
    let expected = r.pos + l * (pd * 8 + h * w * 4 + ad * 8);
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{what}: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut proprios = Vec::with_capacity(l);
    for _ in 0..l {
        let mut p = [0.0; PROPRIO_DIM];
        for v in &mut p {
            *v = r.f64()?;
        }
        proprios.push(p);
    }
    let mut observations = Vec::with_capacity(l);
    for proprio in proprios {
        let mut pixels = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            pixels.push(r.f32()?);
        }
        observations.push(Observation {
            proprio,
            image: Image {
                height: h,
                width: w,
                pixels,
            },
            task_id,
        });
    }
    let mut actions = Vec::with_capacity(l);
    for _ in 0..l {
        let mut a = [0.0; ACTION_DIM];
        for v in &mut a {
            *v = r.f64()?;
        }
        actions.push(ActionVector(a));
    }
    Ok(Trajectory {
        task_id,
        seed,
        observations,
        actions,
        success,
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let ep_dir = dir.join(EPISODES_DIR);
    fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
    for (e, name) in dataset.episodes.iter().zip(&dataset.manifest.episodes) {
        let path = dir.join(name);
        write_file(&path, &encode_episode(e)?)?;
    }
    let json = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| Error::Json {
        path: dir.join(MANIFEST_FILE),
        source: e,
    })?;
    write_file(&dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    let version = value.get("version").and_then(|v| v.as_str()).unwrap_or("");
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(value).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    if manifest.proprio_dim != PROPRIO_DIM || manifest.action_dim != ACTION_DIM {
        return Err(Error::Dim(format!(
            "manifest dims proprio={} action={}",
            manifest.proprio_dim, manifest.action_dim
        )));
    }
    let declared: usize = manifest.tasks.iter().map(|t| t.episodes).sum();
    if declared != manifest.episodes.len() {
        return Err(Error::Integrity(format!(
            "manifest declares {declared} episodes but lists {}",
            manifest.episodes.len()
        )));
    }
    let ep_dir = dir.join(EPISODES_DIR);
    let present = count_episode_files(&ep_dir)?;
    if present != declared {
        return Err(Error::Integrity(format!(
            "manifest declares {declared} episodes, found {present} files in {}",
            ep_dir.display()
        )));
    }
    let mut episodes = Vec::with_capacity(declared);
    for name in &manifest.episodes {
        let path: PathBuf = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let e = decode_episode(&bytes, name)?;
        let dims = e.image_dims().unwrap_or((0, 0));
        if !e.is_empty() && dims != (manifest.image_height, manifest.image_width) {
            return Err(Error::Dim(format!(
                "{name}: image {dims:?} differs from manifest"
            )));
        }
        episodes.push(e);
    }
    for t in &manifest.tasks {
        let n = episodes.iter().filter(|e| e.task_id == t.task_id).count();
        if n != t.episodes {
            return Err(Error::Integrity(format!(
                "task `{}`: manifest says {} episodes, found {n}",
                t.task, t.episodes
            )));
        }
    }
    Ok(Dataset { manifest, episodes })
}

fn count_episode_files(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("ep_") && name.ends_with(".bin") {
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{collect_expert_episode, Image};

    fn synthetic(task_id: usize, seed: u64, proprio: &[[f64; 4]]) -> Trajectory {
        Trajectory {
            task_id,
            seed,
            observations: proprio
                .iter()
                .map(|&p| Observation {
                    proprio: p,
                    image: Image::blank(4, 4),
                    task_id,
                })
                .collect(),
            actions: proprio.iter().map(|p| ActionVector([p[0], p[1], 0.0])).collect(),
            success: true,
        }
    }

    #[test]
    fn two_valued_channel_stats() {
        let e = synthetic(0, 0, &[[0.0, 5.0, 0.0, 0.0], [2.0, 5.0, 0.0, 0.0]]);
        let s = compute_norm_stats(&[e]).unwrap();
        assert_eq!(s.proprio_mean[0], 1.0);
        assert_eq!(s.proprio_std[0], 1.0);
        assert_eq!(s.proprio_mean[1], 5.0);
        assert_eq!(s.proprio_std[1], STD_FLOOR);
    }

    #[test]
    fn empty_stats_error() {
        assert!(matches!(compute_norm_stats(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn normalize_round_trip() {
        let e = synthetic(0, 0, &[[0.1, 0.2, 0.3, -0.4], [0.9, 0.3, -0.1, 0.2]]);
        let s = compute_norm_stats(&[e]).unwrap();
        let p = [0.37, -1.2, 4.0, 0.0];
        let back = s.denormalize_proprio(&s.normalize_proprio(&p));
        for i in 0..4 {
            assert!((back[i] - p[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn episode_codec_round_trip() {
        let task = TaskSpec::by_name("pickplace").unwrap();
        let e = collect_expert_episode(&task, 3).unwrap();
        let bytes = encode_episode(&e).unwrap();
        assert_eq!(decode_episode(&bytes, "x").unwrap(), e);
        let cut = decode_episode(&bytes[..bytes.len() - 3], "x");
        assert!(matches!(cut, Err(Error::Integrity(_))));
    }

    #[test]
    fn chunk_indexing() {
        let rows: Vec<[f64; 4]> = (0..10).map(|i| [i as f64, 0.0, 0.0, 0.0]).collect();
        let ds = Dataset::new(vec![synthetic(0, 0, &rows)], 3, 0).unwrap();
        let c = ds.chunk_at(0, 2, 3, false).unwrap();
        let norm = ds.norm();
        assert_eq!(c.obs_targets[0], norm.normalize_proprio(&rows[3]));
        assert_eq!(c.action_targets.len(), 3);
        let inc = ds.chunk_at(0, 2, 3, true).unwrap();
        assert_eq!(inc.obs_targets[0], norm.normalize_proprio(&rows[2]));
        assert!(ds.chunk_at(0, 7, 3, false).is_err());
        assert_eq!(ds.chunk_starts(3).len(), 7);
    }
}
