use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, split_action_ratio};
use crate::envs::{render, Action, ControlMode, EnvState, MAX_CONTINUOUS_STEP};
use crate::error::{Error, Result};
use crate::eval::{eval_accuracy, eval_mse, probe_score, MetricKind, ProbeResult};
use crate::math::{argmax, Adam, AdamConfig, Graph, Tensor};
use crate::models::{save_model, LamModel, ModelShape, Stage, Variant};
use crate::training::{
    compute_lambda, distill_objective, distill_step, finetune_step, idm_latents, pretrain_step,
    pretrain_step_mixed, Features, Losses, StageConfig,
};

pub const LOG_FILE: &str = "train_log.jsonl";
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Main,
    Unlabeled,
    Labeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub losses: Losses,
}

/// Evaluation after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Latent probe (pre-training) or action prediction of the composed
    /// policy (fine-tuning) on the test split.
    pub metric: Option<ProbeResult>,
    /// Stage objective on the test split where one is defined.
    pub eval_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Option<Stage>,
    pub lambda: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_s: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Header { stage: Option<Stage>, lambda: Option<f64> },
    Step(StepRecord),
    Epoch(EpochRecord),
    End { wall_clock_s: f64 },
}

impl TrainLog {
    /// Last epoch metric, if any.
    pub fn final_metric(&self) -> Option<&ProbeResult> {
        self.epochs.iter().rev().find_map(|e| e.metric.as_ref())
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let mut line = |l: &Line| -> Result<()> {
            serde_json::to_writer(&mut out, l)?;
            out.push(b'\n');
            Ok(())
        };
        line(&Line::Header {
            stage: self.stage,
            lambda: self.lambda,
        })?;
        for s in &self.steps {
            line(&Line::Step(s.clone()))?;
        }
        for e in &self.epochs {
            line(&Line::Epoch(e.clone()))?;
        }
        line(&Line::End {
            wall_clock_s: self.wall_clock_s,
        })?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainLog::default();
        for (i, raw) in text.lines().enumerate() {
            let l: Line = serde_json::from_str(raw)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
            match l {
                Line::Header { stage, lambda } => {
                    log.stage = stage;
                    log.lambda = lambda;
                }
                Line::Step(s) => log.steps.push(s),
                Line::Epoch(e) => log.epochs.push(e),
                Line::End { wall_clock_s } => log.wall_clock_s = wall_clock_s,
            }
        }
        Ok(log)
    }
}

#[derive(Debug)]
pub struct StageOutput {
    pub model: LamModel,
    pub stages: Vec<Stage>,
    pub log: TrainLog,
}

/// `(labeled, unlabeled)` train ids; ratio 0 labels nothing.
pub fn labeled_split(features: &Features, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if ratio == 0.0 {
        return Ok((Vec::new(), features.train.clone()));
    }
    split_action_ratio(&features.train, ratio, seed)
}

/// Cycles through shuffled batches of a small id set, one pass after another.
struct Cycler<'a> {
    ids: &'a [usize],
    batch: usize,
    seed: u64,
    pass: u64,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> Cycler<'a> {
    fn new(ids: &'a [usize], batch: usize, seed: u64) -> Self {
        Self {
            ids,
            batch,
            seed,
            pass: 0,
            queue: Vec::new().into_iter(),
        }
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        loop {
            if let Some(b) = self.queue.next() {
                return Ok(b);
            }
            self.queue = batch_iterator(self.ids, self.batch, self.seed, self.pass)?;
            self.pass += 1;
        }
    }
}

/// IDM latents of `ids`, evaluated in chunks.
pub(crate) fn latents_of(model: &LamModel, features: &Features, ids: &[usize]) -> Result<Tensor> {
    let k = model.latent_dim();
    let mut data = Vec::with_capacity(ids.len() * k);
    for chunk in ids.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let z = idm_latents(model, &mut g, &features.batch(chunk))?;
        data.extend_from_slice(g.value(z).data());
    }
    Tensor::new(vec![ids.len(), k], data)
}

/// Test-split evaluation of `model` as done after training epochs of `cfg.stage`.
pub fn evaluate(cfg: &StageConfig, model: &LamModel, features: &Features, epoch: usize) -> Result<EpochRecord> {
    let test = &features.test;
    let name = format!("{}-{:?}-epoch{epoch}", model.variant, cfg.stage).to_lowercase();
    let mut rec = EpochRecord {
        epoch,
        metric: None,
        eval_loss: None,
    };
    if test.is_empty() {
        return Ok(rec);
    }
    match cfg.stage {
        Stage::Pretrain => {
            let z = latents_of(model, features, test)?;
            let actions: Vec<_> = test.iter().map(|&i| features.actions[i]).collect();
            rec.metric = Some(probe_score(&z, &actions, &cfg.probe, cfg.seed, &name)?);
        }
        Stage::Distill => {
            let mut total = 0.0;
            for chunk in test.chunks(EVAL_CHUNK) {
                let mut g = Graph::new();
                let l = distill_objective(&mut g, model, &features.batch(chunk), false)?;
                total += g.scalar_f64(l) * chunk.len() as f64;
            }
            rec.eval_loss = Some(total / test.len() as f64);
        }
        Stage::Finetune => {
            let mut preds: Vec<f32> = Vec::new();
            for chunk in test.chunks(EVAL_CHUNK) {
                let b = features.batch(chunk);
                preds.extend(predict_actions(model, &b.s, &b.task_ids)?.data());
            }
            let actions: Vec<_> = test.iter().map(|&i| features.actions[i]).collect();
            let cols = preds.len() / test.len();
            let pred = Tensor::new(vec![test.len(), cols], preds)?;
            let (kind, value) = match actions[0].index() {
                Some(_) => {
                    let truth: Vec<usize> = actions.iter().filter_map(|a| a.index()).collect();
                    (MetricKind::Accuracy, eval_accuracy(&pred.argmax_rows(), &truth)?)
                }
                None => {
                    let data: Vec<f32> = actions.iter().flat_map(|a| a.as_vec2().unwrap_or([0.0; 2])).collect();
                    (MetricKind::Mse, eval_mse(&pred, &Tensor::new(vec![test.len(), 2], data)?)?)
                }
            };
            rec.metric = Some(ProbeResult {
                kind,
                value,
                n_samples: test.len(),
                seed: cfg.seed,
                checkpoint: name,
            });
        }
    }
    Ok(rec)
}

/// Output of the composed policy `d_action(policy(s, task))`.
pub fn predict_actions(model: &LamModel, states: &Tensor, task_ids: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = g.input(states.clone())?;
    let z = model.policy_forward(&mut g, s, task_ids, false)?;
    let a = model.action_decode(&mut g, z, false)?;
    Ok(g.value(a).clone())
}

/// Acts in the environment with the composed policy: render, encode, then
/// `d_action(policy(s, task))`. Discrete outputs are argmaxed, continuous
/// ones clamped to the largest legal step.
pub fn composed_action(model: &LamModel, state: &EnvState) -> Result<Action> {
    let frame = render(state);
    let s = Tensor::new(vec![1, model.state_dim()], model.encoder.encode(&frame.data)?)?;
    let out = predict_actions(model, &s, &[state.task_id])?;
    Ok(match model.shape.control_mode {
        ControlMode::Discrete5 => Action::Discrete(argmax(out.data()) as u8),
        ControlMode::Continuous2d => {
            let d = out.data();
            let c = |v: f32| if v.is_finite() { v.clamp(-MAX_CONTINUOUS_STEP, MAX_CONTINUOUS_STEP) } else { 0.0 };
            Action::Continuous(c(d[0]), c(d[1]))
        }
    })
}

pub fn run_stage(
    cfg: &StageConfig,
    features: &Features,
    prior: Option<(LamModel, Vec<Stage>)>,
    out_dir: Option<&Path>,
) -> Result<StageOutput> {
    run_stage_with(cfg, features, prior, out_dir, &mut |_, _| Ok(()))
}

/// Runs one stage. `on_epoch` sees the model after every evaluated epoch.
pub fn run_stage_with(
    cfg: &StageConfig,
    features: &Features,
    prior: Option<(LamModel, Vec<Stage>)>,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&LamModel, &EpochRecord) -> Result<()>,
) -> Result<StageOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let (mut model, mut stages) = match (cfg.stage, prior) {
        (Stage::Pretrain, None) => {
            let shape = ModelShape::for_env(&features.env);
            let mode = cfg.latent_mode_for(features.env.control_mode);
            let m = LamModel::new(cfg.variant, mode, cfg.model.clone(), shape, cfg.seed)?;
            (m, Vec::new())
        }
        (Stage::Pretrain, Some(_)) => return Err(Error::usage("pre-training starts from a fresh model")),
        (stage, None) => return Err(Error::usage(format!("{stage:?} needs a prior checkpoint"))),
        (stage, Some((m, st))) => {
            let need = if stage == Stage::Distill { Stage::Pretrain } else { Stage::Distill };
            if !st.contains(&need) {
                return Err(Error::usage(format!("{stage:?} needs a {need:?} checkpoint")));
            }
            if m.variant != cfg.variant {
                return Err(Error::usage(format!("checkpoint is {}, config asks for {}", m.variant, cfg.variant)));
            }
            (m, st)
        }
    };
    if model.state_dim() != features.state_dim() {
        return Err(Error::usage("features were encoded for a different frame size"));
    }

    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut log = TrainLog {
        stage: Some(cfg.stage),
        ..TrainLog::default()
    };
    let (labeled, unlabeled) = labeled_split(features, cfg.action_ratio, cfg.ratio_seed)?;
    let mixed = cfg.stage == Stage::Pretrain && cfg.is_mixed();
    if mixed {
        log.lambda = Some(match (cfg.lambda_override, cfg.variant) {
            (Some(l), _) => l,
            (None, Variant::LaofAction) => compute_lambda(unlabeled.len(), labeled.len())?,
            (None, _) => 1.0,
        });
    }
    if cfg.stage == Stage::Finetune && labeled.is_empty() {
        return Err(Error::usage("fine-tuning needs action_ratio > 0"));
    }

    let result = (|| -> Result<()> {
        let mut cycler = Cycler::new(&labeled, cfg.labeled_batch_size, cfg.seed ^ 0x5bd1_e995);
        for epoch in 0..cfg.epochs {
            let driver: &[usize] = match cfg.stage {
                Stage::Pretrain if mixed && !unlabeled.is_empty() => &unlabeled,
                Stage::Pretrain if mixed => &labeled,
                Stage::Finetune => &labeled,
                _ => &features.train,
            };
            for ids in batch_iterator(driver, cfg.batch_size, cfg.seed, epoch as u64)? {
                let mut push = |phase, losses| {
                    let step = log.steps.len();
                    log.steps.push(StepRecord { step, epoch, phase, losses });
                };
                match cfg.stage {
                    Stage::Pretrain if mixed => {
                        let lambda = log.lambda.unwrap_or(0.0);
                        let (ub, lb) = if unlabeled.is_empty() {
                            (None, Some(features.batch(&ids)))
                        } else if labeled.is_empty() {
                            (Some(features.batch(&ids)), None)
                        } else {
                            (Some(features.batch(&ids)), Some(features.batch(&cycler.next_batch()?)))
                        };
                        let (a, b) = pretrain_step_mixed(&mut model, &mut opt, ub.as_ref(), lb.as_ref(), lambda, cfg.action_loss)?;
                        if let Some(a) = a {
                            push(Phase::Unlabeled, a);
                        }
                        if let Some(b) = b {
                            push(Phase::Labeled, b);
                        }
                    }
                    Stage::Pretrain => push(Phase::Main, pretrain_step(&mut model, &mut opt, &features.batch(&ids))?),
                    Stage::Distill => push(Phase::Main, distill_step(&mut model, &mut opt, &features.batch(&ids))?),
                    Stage::Finetune => push(
                        Phase::Main,
                        finetune_step(&mut model, &mut opt, &features.batch(&ids), cfg.action_loss)?,
                    ),
                }
            }
            if cfg.probe_every > 0 && ((epoch + 1) % cfg.probe_every == 0 || epoch + 1 == cfg.epochs) {
                let rec = evaluate(cfg, &model, features, epoch + 1)?;
                on_epoch(&model, &rec)?;
                log.epochs.push(rec);
            }
        }
        Ok(())
    })();
    log.wall_clock_s = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        log.write_jsonl(dir.join(LOG_FILE))?;
    }
    result?;
    stages.push(cfg.stage);
    if let Some(dir) = out_dir {
        save_model(&model, &stages, dir)?;
    }
    Ok(StageOutput { model, stages, log })
}
