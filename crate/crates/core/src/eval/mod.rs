//! Latent probes, downstream rollouts, correlation and experiment tables.

mod table;

pub use table::{
    aggregate_experiments, write_lambda_series, write_ratio_series, write_table_csv, Cell, ExperimentRow,
    ExperimentTable, Summary,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::batch_iterator;
use crate::envs::{env_reset, env_step, Action, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::math::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::models::Mlp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kind: MetricKind,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 3,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

/// Small decoder trained on frozen latents. Inputs are standardized with the
/// statistics of its training set.
#[derive(Clone, Debug)]
pub struct Probe {
    pub kind: MetricKind,
    pub steps: usize,
    net: Mlp,
    params: ParamStore,
    mean: Vec<f32>,
    std: Vec<f32>,
}

fn targets_kind(actions: &[Action]) -> Result<MetricKind> {
    match actions.first() {
        None => Err(Error::usage("no probe samples")),
        Some(Action::Discrete(_)) => Ok(MetricKind::Accuracy),
        Some(Action::Continuous(..)) => Ok(MetricKind::Mse),
    }
}

fn action_ids(actions: &[Action]) -> Result<Vec<usize>> {
    actions
        .iter()
        .map(|a| a.index().ok_or_else(|| Error::usage("mixed action kinds")))
        .collect()
}

fn action_vecs(actions: &[Action]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(actions.len() * 2);
    for a in actions {
        data.extend(a.as_vec2().ok_or_else(|| Error::usage("mixed action kinds"))?);
    }
    Tensor::new(vec![actions.len(), 2], data)
}

fn standardize(x: &Tensor, mean: &[f32], std: &[f32]) -> Tensor {
    let c = mean.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % c]) / std[i % c])
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

/// Trains a fresh one-hidden-layer probe for `cfg.epochs` epochs on
/// `latents` (rows) against `actions`.
pub fn train_probe(latents: &Tensor, actions: &[Action], cfg: &ProbeConfig, seed: u64) -> Result<Probe> {
    let kind = targets_kind(actions)?;
    if latents.rank() != 2 || latents.rows() != actions.len() {
        return Err(Error::usage(format!(
            "{} latent rows for {} actions",
            latents.shape().first().unwrap_or(&0),
            actions.len()
        )));
    }
    let (n, k) = (latents.rows(), latents.cols());
    let mut mean = vec![0.0f64; k];
    let mut var = vec![0.0f64; k];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(latents.row(r)) {
            *m += v as f64 / n as f64;
        }
    }
    for r in 0..n {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(latents.row(r)) {
            *s += (v as f64 - m).powi(2) / n as f64;
        }
    }
    let mean: Vec<f32> = mean.into_iter().map(|m| m as f32).collect();
    let std: Vec<f32> = var.into_iter().map(|v| (v.sqrt() as f32).max(1e-6)).collect();
    let x = standardize(latents, &mean, &std);

    let out = match kind {
        MetricKind::Accuracy => crate::envs::N_DISCRETE_ACTIONS,
        MetricKind::Mse => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let net = Mlp::new(&mut params, "probe", k, &[cfg.hidden], out, &mut rng)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let ids: Vec<usize> = (0..n).collect();
    let (labels, vecs) = match kind {
        MetricKind::Accuracy => (action_ids(actions)?, None),
        MetricKind::Mse => (Vec::new(), Some(action_vecs(actions)?)),
    };
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        for batch in batch_iterator(&ids, cfg.batch_size, seed, epoch as u64)? {
            let mut g = Graph::new();
            let xb = g.input(x.gather_rows(&batch))?;
            let pred = net.forward(&mut g, &params, xb, true)?;
            let loss = match kind {
                MetricKind::Accuracy => {
                    let t: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    g.softmax_cross_entropy(pred, &t)?
                }
                MetricKind::Mse => {
                    let t = g.input(vecs.as_ref().unwrap().gather_rows(&batch))?;
                    g.mse(pred, t)?
                }
            };
            let grads = g.backward(loss)?;
            opt.step(&mut params, &grads)?;
            steps += 1;
        }
    }
    Ok(Probe {
        kind,
        steps,
        net,
        params,
        mean,
        std,
    })
}

impl Probe {
    /// Logits (discrete) or `(dx, dy)` rows.
    pub fn predict(&self, latents: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(standardize(latents, &self.mean, &self.std))?;
        let y = self.net.forward(&mut g, &self.params, x, false)?;
        Ok(g.value(y).clone())
    }

    /// Accuracy or squared-error MSE of the probe on `(latents, actions)`.
    pub fn score(&self, latents: &Tensor, actions: &[Action]) -> Result<f64> {
        let pred = self.predict(latents)?;
        match self.kind {
            MetricKind::Accuracy => eval_accuracy(&pred.argmax_rows(), &action_ids(actions)?),
            MetricKind::Mse => eval_mse(&pred, &action_vecs(actions)?),
        }
    }
}

/// The probe protocol on a set of held-out transitions: a seeded half trains
/// the probe, the other half scores it.
pub fn probe_score(latents: &Tensor, actions: &[Action], cfg: &ProbeConfig, seed: u64, checkpoint: &str) -> Result<ProbeResult> {
    let n = actions.len();
    if n < 2 {
        return Err(Error::usage("probe needs at least two held-out samples"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
    let (fit, held) = order.split_at(n / 2);
    let pick = |ids: &[usize]| -> Vec<Action> { ids.iter().map(|&i| actions[i]).collect() };
    let probe = train_probe(&latents.gather_rows(fit), &pick(fit), cfg, seed)?;
    let value = probe.score(&latents.gather_rows(held), &pick(held))?;
    Ok(ProbeResult {
        kind: probe.kind,
        value,
        n_samples: held.len(),
        seed,
        checkpoint: checkpoint.to_string(),
    })
}

/// Fraction of exact matches.
pub fn eval_accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() || truth.is_empty() {
        return Err(Error::usage(format!(
            "accuracy over {} predictions and {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let hits = predictions.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean over rows of the squared Euclidean error.
pub fn eval_mse(predictions: &Tensor, truth: &Tensor) -> Result<f64> {
    if predictions.shape() != truth.shape() || truth.rank() != 2 || truth.rows() == 0 {
        return Err(Error::usage(format!(
            "mse over shapes {:?} and {:?}",
            predictions.shape(),
            truth.shape()
        )));
    }
    let sq: f64 = predictions
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    Ok(sq / truth.rows() as f64)
}

/// Anything that picks actions in an environment.
pub trait Controller {
    fn act(&mut self, state: &EnvState) -> Result<Action>;
}

impl<F: FnMut(&EnvState) -> Result<Action>> Controller for F {
    fn act(&mut self, state: &EnvState) -> Result<Action> {
        self(state)
    }
}

/// Fraction of `episodes` that reach the goal within `horizon` steps. Episode
/// seeds are drawn from `seed`.
pub fn rollout_success<C: Controller + ?Sized>(
    controller: &mut C,
    env: &EnvConfig,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<f64> {
    if !env.goal_enabled {
        return Err(Error::usage("rollouts need an environment with a goal"));
    }
    if episodes == 0 {
        return Err(Error::usage("episodes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0;
    for _ in 0..episodes {
        let mut state = env_reset(env, rand::Rng::random(&mut rng))?;
        for _ in 0..horizon {
            let action = controller.act(&state)?;
            let (next, reached) = env_step(&state, &action)?;
            state = next;
            if reached {
                wins += 1;
                break;
            }
        }
    }
    Ok(wins as f64 / episodes as f64)
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::usage(format!("pearson over {} and {} values", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
