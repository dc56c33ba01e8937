//! Dataset persistence, splitting into labeled/unlabeled subsets, and
//! batching.
//!
//! A dataset directory holds `manifest.json` plus flat little-endian binaries:
//! `obs.bin` (two RGB frames per record), `flow_rgb.bin`, `flow_uv.bin`
//! (interleaved `f32` pairs), `masks.bin`, `actions.bin` (`u16` or two `f32`)
//! and `episodes.bin` (`u32` start offsets).

mod store;

pub use store::{generate_dataset, read_dataset, write_dataset};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ControlMode, EnvConfig, FlowLabeling, Policy};
use crate::error::{Error, Result};
use crate::flow::{FlowField, Mask, RgbImage};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// One dataset record.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: RgbImage,
    pub next_obs: RgbImage,
    pub flow_rgb: RgbImage,
    pub flow_uv: FlowField,
    pub mask: Mask,
    pub action: Action,
    pub task_id: u32,
    pub episode: u32,
    pub frame: u32,
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub env: EnvConfig,
    pub n_transitions: usize,
    #[serde(default = "Policy::pretrain_default")]
    pub policy: Policy,
    /// Defaults to masked oracle flow with the env's sigma.
    #[serde(default)]
    pub labeling: Option<FlowLabeling>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Action ratios whose labeled subsets are recorded in the manifest.
    #[serde(default)]
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub ratio_seeds: Vec<u64>,
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

impl DatasetSpec {
    pub fn new(env: EnvConfig, n_transitions: usize, policy: Policy, seed: u64) -> Self {
        Self {
            env,
            n_transitions,
            policy,
            labeling: None,
            test_fraction: DEFAULT_TEST_FRACTION,
            seed,
            ratios: Vec::new(),
            ratio_seeds: Vec::new(),
        }
    }

    pub fn labeling(&self) -> FlowLabeling {
        self.labeling.unwrap_or_else(|| FlowLabeling::for_env(&self.env))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub transitions: usize,
    pub episodes: usize,
}

/// Train/test split over episode ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSplit {
    pub ratio: f64,
    pub seed: u64,
    pub labeled: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub env: EnvConfig,
    pub counts: Counts,
    pub policy: Option<Policy>,
    pub seed: Option<u64>,
    pub flow_source: Option<FlowLabeling>,
    pub splits: Splits,
    /// Task id of every episode.
    pub episode_tasks: Vec<u32>,
    pub ratios: Vec<RatioSplit>,
}

/// A dataset held in memory as flat buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub obs: Vec<u8>,
    pub flow_rgb: Vec<u8>,
    pub flow_uv: Vec<f32>,
    pub masks: Vec<u8>,
    pub actions: Vec<Action>,
    pub episode_starts: Vec<u32>,
}

impl Dataset {
    /// Builds a dataset from consecutive transitions. Episodes must be
    /// numbered `0, 1, ...` in order with frames counting from 0.
    pub fn from_transitions<I>(env: &EnvConfig, transitions: I, test_fraction: f64, split_seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = Result<Transition>>,
    {
        env.validate()?;
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test_fraction {test_fraction} outside [0, 1)")));
        }
        let px = env.width * env.height;
        let mut ds = Dataset {
            manifest: DatasetManifest {
                version: MANIFEST_VERSION,
                env: env.clone(),
                counts: Counts {
                    transitions: 0,
                    episodes: 0,
                },
                policy: None,
                seed: None,
                flow_source: None,
                splits: Splits {
                    train: vec![],
                    test: vec![],
                },
                episode_tasks: vec![],
                ratios: vec![],
            },
            obs: vec![],
            flow_rgb: vec![],
            flow_uv: vec![],
            masks: vec![],
            actions: vec![],
            episode_starts: vec![],
        };
        for (i, t) in transitions.into_iter().enumerate() {
            let t = t?;
            let dims_ok = [&t.obs, &t.next_obs, &t.flow_rgb]
                .iter()
                .all(|im| im.width == env.width && im.height == env.height)
                && t.flow_uv.len() == px
                && t.mask.data.len() == px;
            if !dims_ok {
                return Err(Error::usage(format!("transition {i} does not match the {}x{} frame", env.width, env.height)));
            }
            match (env.control_mode, t.action) {
                (ControlMode::Discrete5, Action::Discrete(_)) | (ControlMode::Continuous2d, Action::Continuous(..)) => {}
                _ => return Err(Error::usage(format!("transition {i}: action {:?} does not match control mode", t.action))),
            }
            let next_episode = ds.episode_starts.len() as u32;
            if t.episode == next_episode && t.frame == 0 {
                ds.episode_starts.push(i as u32);
                ds.manifest.episode_tasks.push(t.task_id);
            } else {
                let cur = next_episode.checked_sub(1);
                let start = ds.episode_starts.last().copied().unwrap_or(0);
                if cur != Some(t.episode) || t.frame as usize != i - start as usize {
                    return Err(Error::usage(format!(
                        "transition {i} (episode {}, frame {}) breaks episode order",
                        t.episode, t.frame
                    )));
                }
                if ds.manifest.episode_tasks[t.episode as usize] != t.task_id {
                    return Err(Error::usage(format!("task id changes inside episode {}", t.episode)));
                }
            }
            ds.obs.extend_from_slice(&t.obs.data);
            ds.obs.extend_from_slice(&t.next_obs.data);
            ds.flow_rgb.extend_from_slice(&t.flow_rgb.data);
            ds.flow_uv.extend(t.flow_uv.interleaved());
            ds.masks.extend_from_slice(&t.mask.data);
            ds.actions.push(t.action);
        }
        if ds.actions.is_empty() {
            return Err(Error::usage("cannot build an empty dataset"));
        }
        ds.manifest.counts = Counts {
            transitions: ds.actions.len(),
            episodes: ds.episode_starts.len(),
        };
        ds.manifest.splits = split_episodes(ds.episode_starts.len(), test_fraction, split_seed);
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn frame_bytes(&self) -> usize {
        self.manifest.env.width * self.manifest.env.height * 3
    }

    fn pixels(&self) -> usize {
        self.manifest.env.width * self.manifest.env.height
    }

    pub fn episode_of(&self, i: usize) -> usize {
        self.episode_starts.partition_point(|&s| s as usize <= i) - 1
    }

    /// Transition ids `[start, end)` of episode `e`.
    pub fn episode_range(&self, e: usize) -> std::ops::Range<usize> {
        let start = self.episode_starts[e] as usize;
        let end = self.episode_starts.get(e + 1).map_or(self.len(), |&s| s as usize);
        start..end
    }

    pub fn task_id(&self, i: usize) -> u32 {
        self.manifest.episode_tasks[self.episode_of(i)]
    }

    pub fn obs(&self, i: usize) -> &[u8] {
        let f = self.frame_bytes();
        &self.obs[2 * i * f..(2 * i + 1) * f]
    }

    pub fn next_obs(&self, i: usize) -> &[u8] {
        let f = self.frame_bytes();
        &self.obs[(2 * i + 1) * f..(2 * i + 2) * f]
    }

    pub fn flow_rgb(&self, i: usize) -> &[u8] {
        let f = self.frame_bytes();
        &self.flow_rgb[i * f..(i + 1) * f]
    }

    pub fn get(&self, i: usize) -> Transition {
        let (w, h) = (self.manifest.env.width, self.manifest.env.height);
        let px = self.pixels();
        let image = |b: &[u8]| RgbImage::from_raw(w, h, b.to_vec()).expect("frame size");
        let e = self.episode_of(i);
        Transition {
            obs: image(self.obs(i)),
            next_obs: image(self.next_obs(i)),
            flow_rgb: image(self.flow_rgb(i)),
            flow_uv: FlowField::from_interleaved(w, h, &self.flow_uv[2 * i * px..2 * (i + 1) * px]).expect("flow size"),
            mask: Mask {
                width: w,
                height: h,
                data: self.masks[i * px..(i + 1) * px].to_vec(),
            },
            action: self.actions[i],
            task_id: self.manifest.episode_tasks[e],
            episode: e as u32,
            frame: (i - self.episode_starts[e] as usize) as u32,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    fn ids_of(&self, episodes: &[u32]) -> Vec<usize> {
        episodes.iter().flat_map(|&e| self.episode_range(e as usize)).collect()
    }

    /// Transition ids of the train split, ascending.
    pub fn train_ids(&self) -> Vec<usize> {
        self.ids_of(&self.manifest.splits.train)
    }

    pub fn test_ids(&self) -> Vec<usize> {
        self.ids_of(&self.manifest.splits.test)
    }

    /// Records the labeled subsets for every `(ratio, seed)` pair.
    pub fn record_ratio_splits(&mut self, ratios: &[f64], seeds: &[u64]) -> Result<()> {
        let train = self.train_ids();
        for &ratio in ratios {
            for &seed in seeds {
                let (labeled, _) = split_action_ratio(&train, ratio, seed)?;
                self.manifest.ratios.push(RatioSplit { ratio, seed, labeled });
            }
        }
        Ok(())
    }
}

/// Seeded episode-level train/test split; at least one test episode when
/// `test_fraction > 0` and there are two or more episodes.
pub fn split_episodes(n_episodes: usize, test_fraction: f64, seed: u64) -> Splits {
    let mut ids: Vec<u32> = (0..n_episodes as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    ids.shuffle(&mut rng);
    let mut n_test = (test_fraction * n_episodes as f64).round() as usize;
    if test_fraction > 0.0 && n_episodes >= 2 {
        n_test = n_test.clamp(1, n_episodes - 1);
    }
    let mut test = ids[..n_test].to_vec();
    let mut train = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Splits { train, test }
}

/// Samples `round(ratio * |train|)` labeled ids without replacement; the rest
/// are unlabeled. Both lists come back sorted.
pub fn split_action_ratio(train: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::usage(format!("action ratio {ratio} outside (0, 1]")));
    }
    let m = (ratio * train.len() as f64).round() as usize;
    let mut ids = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut labeled = ids[..m].to_vec();
    let mut unlabeled = ids[m..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}

/// One epoch of batches over `ids`: a seeded permutation cut into chunks of
/// `batch_size`, keeping the final partial batch.
pub fn batch_iterator(ids: &[usize], batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<std::vec::IntoIter<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::usage("batch_size must be at least 1"));
    }
    if ids.is_empty() {
        return Err(Error::usage("cannot batch an empty split"));
    }
    let mut perm = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    perm.shuffle(&mut rng);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>().into_iter())
}

#[cfg(test)]
mod tests;
