//! Pre-training, distillation and fine-tuning steps, and the stage runner.

mod features;
mod run;

pub use features::{Batch, Features};
pub use run::{
    composed_action, evaluate, labeled_split, predict_actions, run_stage, run_stage_with, EpochRecord, Phase, StageOutput, StepRecord, TrainLog,
    LOG_FILE,
};

use serde::{Deserialize, Serialize};

use crate::envs::{Action, ControlMode};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::math::{Adam, Graph, Var};
use crate::models::{IdmInput, LamModel, LatentMode, ModelConfig, Stage, Variant};

/// `M / (N + M)`.
pub fn compute_lambda(n_unlabeled: usize, m_labeled: usize) -> Result<f64> {
    if n_unlabeled + m_labeled == 0 {
        return Err(Error::usage("lambda needs at least one transition"));
    }
    Ok(m_labeled as f64 / (n_unlabeled + m_labeled) as f64)
}

/// Supervision of discrete actions: cross-entropy on logits, or squared
/// error between logits and the one-hot target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionLoss {
    CrossEntropy,
    Squared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batch size of the labeled sub-step of mixed pre-training.
    pub labeled_batch_size: usize,
    pub lr: f32,
    pub variant: Variant,
    /// Defaults to the latent mode matching the control mode.
    #[serde(default)]
    pub latent_mode: Option<LatentMode>,
    pub action_ratio: f64,
    #[serde(default)]
    pub lambda_override: Option<f64>,
    pub seed: u64,
    /// Seed of the labeled/unlabeled split.
    #[serde(default)]
    pub ratio_seed: u64,
    pub action_loss: ActionLoss,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Probe after every `probe_every` epochs; 0 disables probing.
    pub probe_every: usize,
}

impl StageConfig {
    /// Default schedule for a stage: 10/5/3 epochs, learning rates per
    /// control mode.
    pub fn new(stage: Stage, variant: Variant, control: ControlMode) -> Self {
        let (epochs, lr) = match (stage, control) {
            (Stage::Pretrain, ControlMode::Discrete5) => (10, 3e-4),
            (Stage::Distill, ControlMode::Discrete5) => (5, 2e-4),
            (Stage::Finetune, ControlMode::Discrete5) => (3, 3e-5),
            (Stage::Pretrain, ControlMode::Continuous2d) => (10, 1e-4),
            (Stage::Distill, ControlMode::Continuous2d) => (5, 3.5e-4),
            (Stage::Finetune, ControlMode::Continuous2d) => (3, 3.5e-4),
        };
        Self {
            stage,
            epochs,
            batch_size: 64,
            labeled_batch_size: 64,
            lr,
            variant,
            latent_mode: None,
            action_ratio: 0.0,
            lambda_override: None,
            seed: 0,
            ratio_seed: 0,
            action_loss: ActionLoss::CrossEntropy,
            model: ModelConfig::default(),
            probe: ProbeConfig::default(),
            probe_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.action_ratio) {
            return Err(Error::Config(format!("action_ratio {} outside [0, 1]", self.action_ratio)));
        }
        if let Some(l) = self.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda_override {l} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 || self.labeled_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn latent_mode_for(&self, control: ControlMode) -> LatentMode {
        self.latent_mode.unwrap_or(LatentMode::for_control(control))
    }

    /// Whether pre-training alternates unlabeled and labeled sub-steps.
    pub fn is_mixed(&self) -> bool {
        matches!(self.variant, Variant::LaofAction | Variant::LaomAction)
    }
}

/// Loss components of one step; absent terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flow: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub action: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub codebook: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub commitment: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distill: Option<f64>,
    pub grad_norm: f64,
}

/// Weights of the pre-training terms. A zero weight removes the term from the
/// graph, so the parameters behind it are not touched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub flow: f64,
    pub action: f64,
}

impl LossWeights {
    pub const UNSUPERVISED: LossWeights = LossWeights { flow: 1.0, action: 0.0 };
}

/// Builds the pre-training objective for `batch` and returns the total and
/// its unweighted components.
pub fn pretrain_objective(
    g: &mut Graph,
    model: &LamModel,
    batch: &Batch,
    weights: LossWeights,
    action_loss: ActionLoss,
) -> Result<(Var, Losses)> {
    let w = model.wiring();
    let s = g.input(batch.s.clone())?;
    let s_next = g.input(batch.s_next.clone())?;
    let f = g.input(batch.flow.clone())?;
    let lat = model.idm_forward(g, s, s_next, (w.idm_input == IdmInput::Flow).then_some(f), true)?;
    let mut losses = Losses::default();
    let mut terms: Vec<Var> = Vec::new();

    let mut fdm_flow = None;
    if w.fdm {
        let out = model.fdm_forward(g, s, lat.z, true)?;
        let recon = g.mse(out.next_state, s_next)?;
        losses.recon = Some(g.scalar_f64(recon));
        terms.push(recon);
        fdm_flow = out.flow;
    }
    if weights.flow > 0.0 {
        let pred = match fdm_flow {
            Some(p) => Some(p),
            None if w.flow_decoder.is_some() => Some(model.flow_decode(g, lat.z, Some(s), true)?),
            None => None,
        };
        if let Some(p) = pred {
            let l = g.mse(p, f)?;
            losses.flow = Some(g.scalar_f64(l));
            terms.push(if weights.flow == 1.0 { l } else { g.scale(l, weights.flow as f32)? });
        }
    }
    if weights.action > 0.0 {
        let pred = model.action_decode(g, lat.z, true)?;
        let l = action_objective(g, pred, &batch.actions, action_loss)?;
        losses.action = Some(g.scalar_f64(l));
        terms.push(if weights.action == 1.0 { l } else { g.scale(l, weights.action as f32)? });
    }
    if let Some(vq) = &lat.vq {
        losses.codebook = Some(g.scalar_f64(vq.codebook));
        losses.commitment = Some(g.scalar_f64(vq.commitment));
        terms.push(vq.codebook);
        terms.push(vq.commitment);
    }
    let total = sum_terms(g, &terms)?;
    losses.total = g.scalar_f64(total);
    Ok((total, losses))
}

fn sum_terms(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::usage("objective has no terms"))?;
    rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
}

/// Cross-entropy or squared error against discrete labels, squared error
/// against continuous ones.
pub fn action_objective(g: &mut Graph, pred: Var, actions: &[Action], kind: ActionLoss) -> Result<Var> {
    let cols = g.value(pred).cols();
    match actions.first() {
        None => Err(Error::usage("labeled batch is empty")),
        Some(Action::Discrete(_)) => {
            let ids: Vec<usize> = actions
                .iter()
                .map(|a| a.index().ok_or_else(|| Error::usage("mixed action kinds in batch")))
                .collect::<Result<_>>()?;
            match kind {
                ActionLoss::CrossEntropy => g.softmax_cross_entropy(pred, &ids),
                ActionLoss::Squared => {
                    let mut one_hot = vec![0.0; ids.len() * cols];
                    for (r, &i) in ids.iter().enumerate() {
                        one_hot[r * cols + i] = 1.0;
                    }
                    let t = g.input(crate::math::Tensor::new(vec![ids.len(), cols], one_hot)?)?;
                    g.mse(pred, t)
                }
            }
        }
        Some(Action::Continuous(..)) => {
            let mut data = Vec::with_capacity(actions.len() * 2);
            for a in actions {
                data.extend(a.as_vec2().ok_or_else(|| Error::usage("mixed action kinds in batch"))?);
            }
            let t = g.input(crate::math::Tensor::new(vec![actions.len(), 2], data)?)?;
            g.mse(pred, t)
        }
    }
}

fn apply(model: &mut LamModel, opt: &mut Adam, g: &mut Graph, total: Var, losses: &mut Losses) -> Result<()> {
    if !losses.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = g.backward(total)?;
    losses.grad_norm = grads.global_norm() as f64;
    opt.step(&mut model.params, &grads)
}

/// One optimizer step on the variant's unsupervised objective.
pub fn pretrain_step(model: &mut LamModel, opt: &mut Adam, batch: &Batch) -> Result<Losses> {
    let mut g = Graph::new();
    let (total, mut losses) = pretrain_objective(&mut g, model, batch, LossWeights::UNSUPERVISED, ActionLoss::CrossEntropy)?;
    apply(model, opt, &mut g, total, &mut losses)?;
    Ok(losses)
}

/// Weights of the two sub-steps of mixed pre-training at loss weight `lambda`.
pub fn mixed_weights(variant: Variant, lambda: f64) -> Result<(LossWeights, LossWeights)> {
    match variant {
        Variant::LaofAction => Ok((
            LossWeights { flow: 1.0 - lambda, action: 0.0 },
            LossWeights { flow: 0.0, action: lambda },
        )),
        Variant::LaomAction => Ok((
            LossWeights { flow: 0.0, action: 0.0 },
            LossWeights { flow: 0.0, action: lambda },
        )),
        other => Err(Error::usage(format!("{other} does not use action labels in pre-training"))),
    }
}

/// Alternating update: an unlabeled sub-step on `L_recon + (1 - lambda) L_flow`
/// followed by a labeled sub-step on `L_recon + lambda L_action`.
pub fn pretrain_step_mixed(
    model: &mut LamModel,
    opt: &mut Adam,
    unlabeled: Option<&Batch>,
    labeled: Option<&Batch>,
    lambda: f64,
    action_loss: ActionLoss,
) -> Result<(Option<Losses>, Option<Losses>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::usage(format!("lambda {lambda} outside [0, 1]")));
    }
    let (wa, wb) = mixed_weights(model.variant, lambda)?;
    let a = match unlabeled {
        Some(batch) => {
            let mut g = Graph::new();
            let (total, mut l) = pretrain_objective(&mut g, model, batch, wa, action_loss)?;
            apply(model, opt, &mut g, total, &mut l)?;
            Some(l)
        }
        None => None,
    };
    let b = match labeled {
        Some(batch) => {
            if batch.actions.is_empty() {
                return Err(Error::usage("labeled batch without actions"));
            }
            let mut g = Graph::new();
            let (total, mut l) = pretrain_objective(&mut g, model, batch, wb, action_loss)?;
            apply(model, opt, &mut g, total, &mut l)?;
            Some(l)
        }
        None => None,
    };
    Ok((a, b))
}

/// Latent actions of the frozen IDM.
pub fn idm_latents(model: &LamModel, g: &mut Graph, batch: &Batch) -> Result<Var> {
    let s = g.input(batch.s.clone())?;
    let s_next = g.input(batch.s_next.clone())?;
    let f = (model.wiring().idm_input == IdmInput::Flow)
        .then(|| g.input(batch.flow.clone()))
        .transpose()?;
    let lat = model.idm_forward(g, s, s_next, f, false)?;
    Ok(lat.z)
}

/// Builds `mse(policy(s_t, task), IDM(s_t, s_{t+1}))` with the IDM frozen.
pub fn distill_objective(g: &mut Graph, model: &LamModel, batch: &Batch, train: bool) -> Result<Var> {
    let z = idm_latents(model, g, batch)?;
    let target = g.detach(z)?;
    let s = g.input(batch.s.clone())?;
    let pred = model.policy_forward(g, s, &batch.task_ids, train)?;
    g.mse(pred, target)
}

pub fn distill_step(model: &mut LamModel, opt: &mut Adam, batch: &Batch) -> Result<Losses> {
    let mut g = Graph::new();
    let total = distill_objective(&mut g, model, batch, true)?;
    let v = g.scalar_f64(total);
    let mut losses = Losses {
        total: v,
        distill: Some(v),
        ..Losses::default()
    };
    apply(model, opt, &mut g, total, &mut losses)?;
    Ok(losses)
}

/// Action decoder objective on top of the frozen policy.
pub fn finetune_objective(g: &mut Graph, model: &LamModel, batch: &Batch, kind: ActionLoss, train: bool) -> Result<Var> {
    let s = g.input(batch.s.clone())?;
    let z = model.policy_forward(g, s, &batch.task_ids, false)?;
    let pred = model.action_decode(g, z, train)?;
    action_objective(g, pred, &batch.actions, kind)
}

pub fn finetune_step(model: &mut LamModel, opt: &mut Adam, batch: &Batch, kind: ActionLoss) -> Result<Losses> {
    let mut g = Graph::new();
    let total = finetune_objective(&mut g, model, batch, kind, true)?;
    let v = g.scalar_f64(total);
    let mut losses = Losses {
        total: v,
        action: Some(v),
        ..Losses::default()
    };
    apply(model, opt, &mut g, total, &mut losses)?;
    Ok(losses)
}
