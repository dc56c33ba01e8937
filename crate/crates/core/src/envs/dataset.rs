use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Transition;
use crate::envs::{
    env_reset, env_step, oracle_agent_mask, oracle_flow, random_action, render, scripted_expert,
    Action, EnvConfig, EnvState,
};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow_hs, flow_to_rgb, mask_flow, FlowField, FlowSource, RgbImage};

/// Behaviour policy used while collecting transitions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Policy {
    Expert,
    UniformRandom,
    /// Expert action, replaced by a uniformly random one with probability
    /// `epsilon`.
    EpsilonMixture { epsilon: f64 },
}

impl Policy {
    pub const PRETRAIN_EPSILON: f64 = 0.3;

    pub fn pretrain_default() -> Self {
        Policy::EpsilonMixture {
            epsilon: Self::PRETRAIN_EPSILON,
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &EnvState, rng: &mut R) -> Result<Action> {
        match *self {
            Policy::Expert => scripted_expert(state),
            Policy::UniformRandom => Ok(random_action(&state.config, rng)),
            Policy::EpsilonMixture { epsilon } => {
                if !(0.0..=1.0).contains(&epsilon) {
                    return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
                }
                // draw both so the stream of random numbers does not depend on the branch
                let explore = rng.random_bool(epsilon);
                let random = random_action(&state.config, rng);
                if explore {
                    Ok(random)
                } else {
                    scripted_expert(state)
                }
            }
        }
    }
}

/// How flow pseudo-labels are produced for each transition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowLabeling {
    pub source: FlowSource,
    pub sigma: f32,
    /// Keep only agent pixels in the RGB flow (object-centric flow).
    pub masked: bool,
}

impl FlowLabeling {
    pub fn for_env(config: &EnvConfig) -> Self {
        Self {
            source: FlowSource::Oracle,
            sigma: config.default_sigma(),
            masked: true,
        }
    }
}

/// Streams transitions from consecutive episodes. An episode ends when the
/// goal is reached or after `H + W` steps.
pub struct TransitionStream {
    config: EnvConfig,
    policy: Policy,
    labeling: FlowLabeling,
    remaining: usize,
    seeds: ChaCha8Rng,
    actions: ChaCha8Rng,
    noise: ChaCha8Rng,
    state: Option<(EnvState, RgbImage)>,
    episode: u32,
    frame: u32,
}

/// Collects `n` transitions with `policy`, deterministically in `seed`.
pub fn generate_transitions(
    config: &EnvConfig,
    n: usize,
    policy: Policy,
    labeling: FlowLabeling,
    seed: u64,
) -> Result<TransitionStream> {
    config.validate()?;
    if n == 0 {
        return Err(Error::usage("n_transitions must be positive"));
    }
    if !(labeling.sigma > 0.0) {
        return Err(Error::Config("flow sigma must be positive".into()));
    }
    if !config.goal_enabled && policy != Policy::UniformRandom {
        return Err(Error::usage("expert policies need goal_enabled"));
    }
    let root = ChaCha8Rng::seed_from_u64(seed);
    let fork = |stream: u64| {
        let mut r = root.clone();
        r.set_stream(stream);
        r
    };
    Ok(TransitionStream {
        config: config.clone(),
        policy,
        labeling,
        remaining: n,
        seeds: fork(1),
        actions: fork(2),
        noise: fork(3),
        state: None,
        episode: 0,
        frame: 0,
    })
}

impl TransitionStream {
    fn label(&mut self, s: &EnvState, next: &EnvState, o: &RgbImage, o1: &RgbImage) -> Result<(FlowField, RgbImage)> {
        let mut uv = match self.labeling.source {
            FlowSource::Oracle => oracle_flow(s, next)?,
            FlowSource::HornSchunck { alpha, iterations } => estimate_flow_hs(o, o1, alpha, iterations)?,
            FlowSource::OracleNoisy { noise_std } => {
                let mut f = oracle_flow(s, next)?;
                let normal = Normal::new(0.0f32, noise_std)
                    .map_err(|e| Error::Config(format!("noise_std {noise_std}: {e}")))?;
                for x in f.u.iter_mut().chain(f.v.iter_mut()) {
                    *x += normal.sample(&mut self.noise);
                }
                f
            }
        };
        let mut rgb = flow_to_rgb(&uv, self.labeling.sigma)?;
        if self.labeling.masked {
            let mask = oracle_agent_mask(s);
            rgb = mask_flow(&rgb, &mask)?;
            for (i, &m) in mask.data.iter().enumerate() {
                if m == 0 {
                    uv.u[i] = 0.0;
                    uv.v[i] = 0.0;
                }
            }
        }
        Ok((uv, rgb))
    }

    fn next_transition(&mut self) -> Result<Transition> {
        if self.state.is_none() {
            let s = env_reset(&self.config, self.seeds.random())?;
            let o = render(&s);
            self.state = Some((s, o));
            self.frame = 0;
        }
        let (s, o) = self.state.take().unwrap();
        let action = self.policy.act(&s, &mut self.actions)?;
        let (next, reached) = env_step(&s, &action)?;
        let o1 = render(&next);
        let (flow_uv, flow_rgb) = self.label(&s, &next, &o, &o1)?;
        let t = Transition {
            mask: oracle_agent_mask(&s),
            obs: o,
            next_obs: o1.clone(),
            flow_rgb,
            flow_uv,
            action,
            task_id: s.task_id as u32,
            episode: self.episode,
            frame: self.frame,
        };
        self.frame += 1;
        if reached || self.frame as usize >= self.config.horizon() {
            self.episode += 1;
        } else {
            self.state = Some((next, o1));
        }
        Ok(t)
    }
}

impl Iterator for TransitionStream {
    type Item = Result<Transition>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let t = self.next_transition();
        if t.is_err() {
            self.remaining = 0;
        }
        Some(t)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}
