//! Task-indexed meta-datasets of randomly excited trajectories.

use std::fs;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{shape_err, MakoError, Result};
use crate::seed::derive_seed;
use crate::systems::{sample_params_with, stratified_params_with, PhysicalConstants, SystemKind, SystemParams};

const DATASET_MAGIC: &[u8; 8] = b"MAKODSET";
pub const DATASET_VERSION: u32 = 1;
const MAX_REGENERATIONS: u64 = 1000;
pub const STD_FLOOR: f64 = 1e-8;

/// One fixed-length trajectory. Row-major storage; `segment[t]` changes
/// where a terminated run was restarted, so `(x_t, u_t) -> x_{t+1}` is a
/// valid transition only when `segment[t] == segment[t + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub states: Vec<f64>,
    pub inputs: Vec<f64>,
    pub segment: Vec<u32>,
    state_dim: usize,
    input_dim: usize,
}

impl Episode {
    fn with_capacity(len: usize, state_dim: usize, input_dim: usize) -> Self {
        Self {
            states: Vec::with_capacity(len * state_dim),
            inputs: Vec::with_capacity(len * input_dim),
            segment: Vec::with_capacity(len),
            state_dim,
            input_dim,
        }
    }

    /// Builds an episode from row-major buffers, checking that their
    /// lengths agree.
    pub fn from_parts(
        states: Vec<f64>,
        inputs: Vec<f64>,
        segment: Vec<u32>,
        state_dim: usize,
        input_dim: usize,
    ) -> Result<Self> {
        let len = segment.len();
        if states.len() != len * state_dim || inputs.len() != len * input_dim {
            return Err(shape_err(
                "episode buffers",
                format!("{} states, {} inputs", len * state_dim, len * input_dim),
                format!("{} states, {} inputs", states.len(), inputs.len()),
            ));
        }
        Ok(Self {
            states,
            inputs,
            segment,
            state_dim,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    fn push(&mut self, x: &[f64], u: &[f64], segment: u32) {
        self.states.extend_from_slice(x);
        self.inputs.extend_from_slice(u);
        self.segment.push(segment);
    }

    /// Whether `start..=start + horizon` stays inside one segment.
    pub fn window_valid(&self, start: usize, horizon: usize) -> bool {
        start + horizon < self.len() && self.segment[start] == self.segment[start + horizon]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubDataset {
    pub params: SystemParams,
    pub episodes: Vec<Episode>,
    /// Episodes thrown away after a divergence and redrawn.
    pub regenerated: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl NormStats {
    pub fn identity(state_dim: usize, input_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn normalize_state(&self, x: &[f64]) -> Vec<f64> {
        standardize(x, &self.state_mean, &self.state_std)
    }

    pub fn denormalize_state(&self, x: &[f64]) -> Vec<f64> {
        unstandardize(x, &self.state_mean, &self.state_std)
    }

    pub fn normalize_input(&self, u: &[f64]) -> Vec<f64> {
        standardize(u, &self.input_mean, &self.input_std)
    }

    pub fn denormalize_input(&self, u: &[f64]) -> Vec<f64> {
        unstandardize(u, &self.input_mean, &self.input_std)
    }
}

fn standardize(v: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(mean.iter().zip(std))
        .map(|(x, (m, s))| (x - m) / s)
        .collect()
}

fn unstandardize(v: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(mean.iter().zip(std))
        .map(|(x, (m, s))| x * s + m)
        .collect()
}

/// Anchor of an `H`-step training window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub task: usize,
    pub episode: usize,
    pub start: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaDataset {
    pub kind: SystemKind,
    pub seed: u64,
    pub episode_len: usize,
    pub subdatasets: Vec<SubDataset>,
    pub norm: NormStats,
    /// `split[i][e]` is the split of episode `e` of sub-dataset `i`.
    pub split: Vec<Vec<Split>>,
    /// Whether the stored samples are already standardized with `norm`.
    pub normalized: bool,
}

/// Rolls out `total_samples / episode_len` episodes under i.i.d. uniform
/// inputs. Episodes that diverge are redrawn from a fresh stream.
pub fn generate_subdataset(
    params: &SystemParams,
    total_samples: usize,
    episode_len: usize,
    seed: u64,
) -> Result<SubDataset> {
    if episode_len == 0 || total_samples % episode_len != 0 {
        return Err(MakoError::InvalidArgument(format!(
            "{total_samples} samples are not a multiple of episode length {episode_len}"
        )));
    }
    let count = total_samples / episode_len;
    let results: Vec<Result<(Episode, usize)>> = (0..count)
        .into_par_iter()
        .map(|e| {
            for attempt in 0..MAX_REGENERATIONS {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[e as u64, attempt]));
                match rollout_episode(params, episode_len, &mut rng) {
                    Ok(ep) => return Ok((ep, attempt as usize)),
                    Err(MakoError::Divergence { .. } | MakoError::Integration { .. }) => continue,
                    Err(other) => return Err(other),
                }
            }
            Err(MakoError::InvalidArgument(format!(
                "episode {e} diverged {MAX_REGENERATIONS} times"
            )))
        })
        .collect();
    let mut episodes = Vec::with_capacity(count);
    let mut regenerated = 0;
    for r in results {
        let (ep, retries) = r?;
        regenerated += retries;
        episodes.push(ep);
    }
    if regenerated > 0 {
        warn!("{regenerated} diverged episodes regenerated for {:?}", params.uncertain);
    }
    Ok(SubDataset {
        params: params.clone(),
        episodes,
        regenerated,
    })
}

fn rollout_episode(params: &SystemParams, len: usize, rng: &mut ChaCha8Rng) -> Result<Episode> {
    let mut ep = Episode::with_capacity(len, params.state_dim(), params.input_dim());
    let mut x = params.sample_initial_state(rng);
    let mut segment = 0u32;
    for _ in 0..len {
        let u = params.sample_input(rng);
        ep.push(&x, &u, segment);
        let next = params.step(&x, &u)?;
        if params.is_terminal(&next) {
            // restart; the partial run stays in the episode
            x = params.sample_initial_state(rng);
            segment += 1;
        } else {
            x = next;
        }
    }
    Ok(ep)
}

/// Episode-level 80/10/10 split: a seeded permutation of the episode
/// indices, with the first 80% train and the next 10% validation.
pub fn assign_splits(episodes: usize, seed: u64, task: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..episodes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5911, task as u64]));
    order.shuffle(&mut rng);
    let n_train = (episodes as f64 * 0.8).round() as usize;
    let n_val = ((episodes as f64 * 0.1).round() as usize).min(episodes - n_train);
    let mut split = vec![Split::Test; episodes];
    for (rank, &e) in order.iter().enumerate() {
        split[e] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    split
}

/// How the task settings of a meta-dataset are drawn from the parameter
/// space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSampling {
    /// Independent uniform draws.
    #[default]
    Iid,
    /// Latin-hypercube draws; marginals are still uniform.
    Stratified,
}

/// Samples `num_tasks` task settings i.i.d. and generates one sub-dataset
/// each.
pub fn generate_meta_dataset(
    constants: &PhysicalConstants,
    kind: SystemKind,
    num_tasks: usize,
    samples_per_task: usize,
    episode_len: usize,
    seed: u64,
) -> Result<MetaDataset> {
    generate_meta_dataset_with(
        constants,
        kind,
        num_tasks,
        samples_per_task,
        episode_len,
        seed,
        TaskSampling::Iid,
    )
}

pub fn generate_meta_dataset_with(
    constants: &PhysicalConstants,
    kind: SystemKind,
    num_tasks: usize,
    samples_per_task: usize,
    episode_len: usize,
    seed: u64,
    sampling: TaskSampling,
) -> Result<MetaDataset> {
    let settings: Vec<SystemParams> = match sampling {
        TaskSampling::Iid => (0..num_tasks)
            .map(|i| sample_params_with(constants, kind, derive_seed(seed, &[0x7a5c, i as u64])))
            .collect(),
        TaskSampling::Stratified => stratified_params_with(constants, kind, num_tasks, derive_seed(seed, &[0x57a7])),
    };
    let mut subdatasets = Vec::with_capacity(num_tasks);
    for (i, params) in settings.iter().enumerate() {
        subdatasets.push(generate_subdataset(
            params,
            samples_per_task,
            episode_len,
            derive_seed(seed, &[0xda7a, i as u64]),
        )?);
    }
    MetaDataset::new(kind, seed, episode_len, subdatasets)
}

impl MetaDataset {
    pub fn new(
        kind: SystemKind,
        seed: u64,
        episode_len: usize,
        subdatasets: Vec<SubDataset>,
    ) -> Result<Self> {
        let split = subdatasets
            .iter()
            .enumerate()
            .map(|(i, s)| assign_splits(s.episodes.len(), seed, i))
            .collect();
        let mut meta = Self {
            kind,
            seed,
            episode_len,
            subdatasets,
            norm: NormStats::identity(kind.state_dim(), kind.input_dim()),
            split,
            normalized: false,
        };
        meta.norm = compute_norm_stats(&meta)?;
        Ok(meta)
    }

    pub fn num_tasks(&self) -> usize {
        self.subdatasets.len()
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.kind.input_dim()
    }

    pub fn episodes_in(&self, which: Split) -> impl Iterator<Item = (usize, usize, &Episode)> {
        self.subdatasets.iter().enumerate().flat_map(move |(i, s)| {
            s.episodes
                .iter()
                .enumerate()
                .filter(move |(e, _)| self.split[i][*e] == which)
                .map(move |(e, ep)| (i, e, ep))
        })
    }

    /// All anchored windows of length `horizon` in `which`, stride 1,
    /// never crossing a restart.
    pub fn windows(&self, horizon: usize, which: Split) -> Vec<Window> {
        let mut out = Vec::new();
        for (task, episode, ep) in self.episodes_in(which) {
            for start in 0..ep.len() {
                if ep.window_valid(start, horizon) {
                    out.push(Window {
                        task,
                        episode,
                        start,
                        split: which,
                    });
                }
            }
        }
        out
    }

    pub fn split_of(&self, task: usize, episode: usize) -> Split {
        self.split[task][episode]
    }

    /// Copy with every state and input standardized by `self.norm`.
    pub fn normalized(&self) -> MetaDataset {
        if self.normalized {
            return self.clone();
        }
        let mut out = self.clone();
        for sub in &mut out.subdatasets {
            for ep in &mut sub.episodes {
                let (n, m) = (ep.state_dim, ep.input_dim);
                for row in ep.states.chunks_exact_mut(n) {
                    let z = self.norm.normalize_state(row);
                    row.copy_from_slice(&z);
                }
                for row in ep.inputs.chunks_exact_mut(m) {
                    let z = self.norm.normalize_input(row);
                    row.copy_from_slice(&z);
                }
            }
        }
        out.normalized = true;
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            params: self.subdatasets.iter().map(|s| s.params.clone()).collect(),
            regenerated: self.subdatasets.iter().map(|s| s.regenerated).collect(),
            episodes: self.subdatasets.iter().map(|s| s.episodes.len()).collect(),
            split: self.split.clone(),
            norm: self.norm.clone(),
            normalized: self.normalized,
        };
        let json = serde_json::to_string(&header).map_err(|e| MakoError::Format(e.to_string()))?;
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u8(self.kind.as_tag());
        w.u64(self.state_dim() as u64);
        w.u64(self.input_dim() as u64);
        w.u64(self.num_tasks() as u64);
        w.u64(self.episode_len as u64);
        w.u64(self.seed);
        w.text(&json);
        for sub in &self.subdatasets {
            for ep in &sub.episodes {
                w.f64s(&ep.states);
                w.f64s(&ep.inputs);
                w.u32s(&ep.segment);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(MakoError::Format(format!(
                "dataset version {version}, expected {DATASET_VERSION}"
            )));
        }
        let kind = SystemKind::from_tag(r.u8()?)
            .ok_or_else(|| MakoError::Format("unknown system tag".into()))?;
        let (n, m) = (r.usize()?, r.usize()?);
        let tasks = r.usize()?;
        let episode_len = r.usize()?;
        let seed = r.u64()?;
        if n != kind.state_dim() || m != kind.input_dim() {
            return Err(MakoError::Format(format!("dims ({n}, {m}) do not match {kind}")));
        }
        let header: Header =
            serde_json::from_str(r.text()?).map_err(|e| MakoError::Format(e.to_string()))?;
        if header.params.len() != tasks
            || header.episodes.len() != tasks
            || header.split.len() != tasks
            || header.regenerated.len() != tasks
        {
            return Err(MakoError::Format("header task count mismatch".into()));
        }
        let mut subdatasets = Vec::with_capacity(tasks);
        for i in 0..tasks {
            let count = header.episodes[i];
            if header.split[i].len() != count {
                return Err(MakoError::Format("split length mismatch".into()));
            }
            let mut episodes = Vec::with_capacity(count);
            for _ in 0..count {
                episodes.push(Episode {
                    states: r.f64s(episode_len * n)?,
                    inputs: r.f64s(episode_len * m)?,
                    segment: r.u32s(episode_len)?,
                    state_dim: n,
                    input_dim: m,
                });
            }
            subdatasets.push(SubDataset {
                params: header.params[i].clone(),
                episodes,
                regenerated: header.regenerated[i],
            });
        }
        r.expect_end()?;
        Ok(Self {
            kind,
            seed,
            episode_len,
            subdatasets,
            norm: header.norm,
            split: header.split,
            normalized: header.normalized,
        })
    }

    /// Human-readable audit of the sampled task settings.
    pub fn manifest(&self) -> String {
        let m = Manifest {
            system: self.kind,
            seed: self.seed,
            episode_len: self.episode_len,
            tasks: self
                .subdatasets
                .iter()
                .enumerate()
                .map(|(i, s)| ManifestTask {
                    index: i,
                    uncertain: s.params.uncertain.clone(),
                    episodes: s.episodes.len(),
                    regenerated: s.regenerated,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&m).expect("manifest serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: Vec<SystemParams>,
    regenerated: Vec<usize>,
    episodes: Vec<usize>,
    split: Vec<Vec<Split>>,
    norm: NormStats,
    normalized: bool,
}

#[derive(Serialize)]
struct Manifest {
    system: SystemKind,
    seed: u64,
    episode_len: usize,
    tasks: Vec<ManifestTask>,
}

#[derive(Serialize)]
struct ManifestTask {
    index: usize,
    uncertain: Vec<f64>,
    episodes: usize,
    regenerated: usize,
}

/// Per-dimension mean and population standard deviation over every
/// training-split sample, pooled across sub-datasets.
pub fn compute_norm_stats(meta: &MetaDataset) -> Result<NormStats> {
    let (n, m) = (meta.state_dim(), meta.input_dim());
    let states = || {
        meta.episodes_in(Split::Train)
            .flat_map(move |(_, _, ep)| ep.states.chunks_exact(n))
    };
    let inputs = || {
        meta.episodes_in(Split::Train)
            .flat_map(move |(_, _, ep)| ep.inputs.chunks_exact(m))
    };
    if states().next().is_none() {
        return Err(MakoError::InvalidArgument("empty training split".into()));
    }
    let (state_mean, state_std) = mean_std(n, states, "state");
    let (input_mean, input_std) = mean_std(m, inputs, "input");
    Ok(NormStats {
        state_mean,
        state_std,
        input_mean,
        input_std,
    })
}

/// Two-pass mean and population standard deviation, std floored at
/// [`STD_FLOOR`].
fn mean_std<'a, I, F>(dim: usize, rows: F, what: &str) -> (Vec<f64>, Vec<f64>)
where
    F: Fn() -> I,
    I: Iterator<Item = &'a [f64]>,
{
    let mut count = 0usize;
    let mut mean = vec![0.0; dim];
    for row in rows() {
        count += 1;
        for (s, v) in mean.iter_mut().zip(row) {
            *s += v;
        }
    }
    let count = count.max(1) as f64;
    mean.iter_mut().for_each(|s| *s /= count);
    let mut var = vec![0.0; dim];
    for row in rows() {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std = var
        .iter()
        .enumerate()
        .map(|(d, v)| {
            let s = (v / count).sqrt();
            if s < STD_FLOOR {
                warn!("{what} dimension {d} is constant; std floored at {STD_FLOOR}");
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}
