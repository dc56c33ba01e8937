//! Declarative runs and sweeps over variants, action ratios, loss weights
//! and seeds, plus the probe/rollout correlation study.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Deserializer, Serialize};

use crate::data::{read_dataset, Dataset, DatasetSpec, DEFAULT_TEST_FRACTION};
use crate::envs::{EnvConfig, FlowLabeling, Policy};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_experiments, pearson, rollout_success, write_lambda_series, write_ratio_series, write_table_csv, ExperimentRow,
    ExperimentTable, ProbeConfig, Summary,
};
use crate::models::{Encoder, LamModel, LatentMode, ModelConfig, Stage, Variant};
use crate::training::{composed_action, run_stage, run_stage_with, ActionLoss, Features, StageConfig, TrainLog};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "LAOF_LAB_THREADS";
pub const SNAPSHOT_FILE: &str = "resolved_config.json";
pub const TABLE_FILE: &str = "table.json";

fn default_transitions() -> usize {
    20_000
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

/// Where transitions come from: an existing dataset directory, or a
/// generated one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_transitions")]
    pub n_transitions: usize,
    /// Defaults to the epsilon mixture for pre-training and to the expert for
    /// distillation and fine-tuning.
    #[serde(default)]
    pub policy: Option<Policy>,
    #[serde(default)]
    pub labeling: Option<FlowLabeling>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            n_transitions: default_transitions(),
            policy: None,
            labeling: None,
            test_fraction: DEFAULT_TEST_FRACTION,
            seed: 0,
        }
    }
}

pub fn default_policy(stage: Stage) -> Policy {
    match stage {
        Stage::Pretrain => Policy::pretrain_default(),
        Stage::Distill | Stage::Finetune => Policy::Expert,
    }
}

impl DataConfig {
    pub fn spec(&self, env: &EnvConfig, stage: Stage) -> DatasetSpec {
        let mut spec = DatasetSpec::new(env.clone(), self.n_transitions, self.policy.unwrap_or(default_policy(stage)), self.seed);
        spec.labeling = self.labeling;
        spec.test_fraction = self.test_fraction;
        spec
    }

    /// Reads `dir` when set, otherwise generates in memory.
    pub fn load(&self, env: &EnvConfig, stage: Stage) -> Result<Dataset> {
        match &self.dir {
            Some(dir) => {
                let ds = read_dataset(dir)?;
                if &ds.manifest.env != env {
                    return Err(Error::Config(format!(
                        "dataset at {} was generated for a different environment",
                        dir.display()
                    )));
                }
                Ok(ds)
            }
            None => Dataset::generate(&self.spec(env, stage)),
        }
    }
}

/// Stage settings that replace the defaults of [`StageConfig::new`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub labeled_batch_size: Option<usize>,
    pub lr: Option<f32>,
    pub latent_mode: Option<LatentMode>,
    pub action_loss: Option<ActionLoss>,
    pub model: Option<ModelConfig>,
    pub probe: Option<ProbeConfig>,
    pub probe_every: Option<usize>,
}

impl StageOverrides {
    pub fn apply(&self, cfg: &mut StageConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.labeled_batch_size {
            cfg.labeled_batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if self.latent_mode.is_some() {
            cfg.latent_mode = self.latent_mode;
        }
        if let Some(v) = self.action_loss {
            cfg.action_loss = v;
        }
        if let Some(v) = &self.model {
            cfg.model = v.clone();
        }
        if let Some(v) = &self.probe {
            cfg.probe = v.clone();
        }
        if let Some(v) = self.probe_every {
            cfg.probe_every = v;
        }
    }

    /// Every field set, taken from `cfg`.
    pub fn from_config(cfg: &StageConfig) -> Self {
        Self {
            epochs: Some(cfg.epochs),
            batch_size: Some(cfg.batch_size),
            labeled_batch_size: Some(cfg.labeled_batch_size),
            lr: Some(cfg.lr),
            latent_mode: cfg.latent_mode,
            action_loss: Some(cfg.action_loss),
            model: Some(cfg.model.clone()),
            probe: Some(cfg.probe.clone()),
            probe_every: Some(cfg.probe_every),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub episodes: usize,
    /// Defaults to the environment's episode length.
    pub horizon: Option<usize>,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            horizon: None,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn success(&self, model: &LamModel, env: &EnvConfig) -> Result<f64> {
        let horizon = self.horizon.unwrap_or(env.horizon());
        rollout_success(&mut |s: &_| composed_action(model, s), env, self.episodes, horizon, self.seed)
    }
}

/// A seed list, or a count `n` meaning `0..n`.
fn seeds<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Seeds {
        Count(u64),
        List(Vec<u64>),
    }
    Ok(match Seeds::deserialize(d)? {
        Seeds::Count(n) => (0..n).collect(),
        Seeds::List(v) => v,
    })
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Laof]
}

fn default_ratios() -> Vec<f64> {
    vec![0.0]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One JSON document describing a run or a sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub stage: StageOverrides,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_ratios")]
    pub action_ratios: Vec<f64>,
    /// Loss weights for the mixed variants; empty keeps each variant's default.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_seeds", deserialize_with = "seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Model directory that distillation, fine-tuning and evaluation start from.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub rollouts: Option<RolloutConfig>,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            data: DataConfig::default(),
            stage: StageOverrides::default(),
            variants: default_variants(),
            action_ratios: default_ratios(),
            lambdas: Vec::new(),
            seeds: default_seeds(),
            out: None,
            checkpoint: None,
            rollouts: None,
            workers: None,
        }
    }
}

/// One point of a sweep grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellSpec {
    pub variant: Variant,
    pub action_ratio: f64,
    pub lambda: Option<f64>,
    pub seed: u64,
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-r{}", self.variant, self.action_ratio)?;
        match self.lambda {
            Some(l) => write!(f, "-l{l}")?,
            None => write!(f, "-ldefault")?,
        }
        write!(f, "-s{}", self.seed)
    }
}

pub fn is_mixed(variant: Variant) -> bool {
    matches!(variant, Variant::LaofAction | Variant::LaomAction)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.variants.is_empty() || self.seeds.is_empty() || self.action_ratios.is_empty() {
            return Err(Error::Config("variants, action_ratios and seeds must be non-empty".into()));
        }
        if self.data.n_transitions == 0 {
            return Err(Error::Config("data.n_transitions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(format!("data.test_fraction {} outside [0, 1)", self.data.test_fraction)));
        }
        for &r in &self.action_ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("action ratio {r} outside [0, 1]")));
            }
        }
        for &l in &self.lambdas {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda {l} outside [0, 1]")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        if let Some(r) = &self.rollouts {
            if r.episodes == 0 {
                return Err(Error::Config("rollouts.episodes must be positive".into()));
            }
        }
        for cell in self.cells() {
            self.stage_config(Stage::Pretrain, &cell).validate()?;
        }
        Ok(())
    }

    /// The grid in row order: variant, ratio, lambda, seed.
    pub fn cells(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &action_ratio in &self.action_ratios {
                let lambdas: Vec<Option<f64>> = if is_mixed(variant) && !self.lambdas.is_empty() {
                    self.lambdas.iter().map(|&l| Some(l)).collect()
                } else {
                    vec![None]
                };
                for lambda in lambdas {
                    for &seed in &self.seeds {
                        out.push(CellSpec {
                            variant,
                            action_ratio,
                            lambda,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn stage_config(&self, stage: Stage, cell: &CellSpec) -> StageConfig {
        let mut cfg = StageConfig::new(stage, cell.variant, self.env.control_mode);
        self.stage.apply(&mut cfg);
        cfg.action_ratio = cell.action_ratio;
        cfg.lambda_override = cell.lambda;
        cfg.seed = cell.seed;
        cfg.ratio_seed = cell.seed;
        cfg
    }

    /// Copy with every default written out, as stored next to run outputs.
    /// The output directory is left out so a re-run needs a fresh one.
    pub fn resolved(&self, stage: Stage) -> RunConfig {
        let mut r = self.clone();
        let mut full = StageConfig::new(stage, self.variants[0], self.env.control_mode);
        self.stage.apply(&mut full);
        r.stage = StageOverrides::from_config(&full);
        if self.data.dir.is_none() {
            r.data.policy = Some(self.data.policy.unwrap_or(default_policy(stage)));
            r.data.labeling = Some(self.data.spec(&self.env, stage).labeling());
        }
        r.out = None;
        r
    }

    pub fn write_snapshot(&self, stage: Stage, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        let text = serde_json::to_string_pretty(&self.resolved(stage))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.stage.model.clone().unwrap_or_default()
    }

    /// Loads or generates the data for `stage` and encodes it.
    pub fn features(&self, stage: Stage) -> Result<Features> {
        let ds = self.data.load(&self.env, stage)?;
        encode(&ds, &self.model_config())
    }
}

pub fn encode(ds: &Dataset, model: &ModelConfig) -> Result<Features> {
    let env = &ds.manifest.env;
    Features::encode(&Encoder::new(env.width, env.height, model.encoder_seed)?, ds)
}

/// Pool width: `requested`, or the available parallelism, capped by
/// `LAOF_LAB_THREADS` when it is set.
pub fn pool_width(requested: Option<usize>) -> usize {
    capped_width(requested, std::env::var(THREADS_ENV).ok().as_deref())
}

fn capped_width(requested: Option<usize>, cap: Option<&str>) -> usize {
    let base = requested.unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()));
    let cap = cap.and_then(|s| s.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    cap.map_or(base, |c| base.min(c)).max(1)
}

/// Runs `f(0..jobs)` on `width` threads. Results come back in job order; after
/// a failure no new jobs start.
pub fn run_pool<T, F>(jobs: usize, width: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..jobs).map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..width.clamp(1, jobs.max(1)) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .unwrap_or_else(|| Err(Error::State("job skipped after an earlier failure".into())))
        })
        .collect()
}

/// Pre-trains every cell of the grid and collects final probe metrics.
///
/// Variants without action supervision never read labels, so their runs are
/// shared across action ratios. Per-cell logs and models go under
/// `out/cells/<cell>` when `out` is given.
pub fn run_sweep(cfg: &RunConfig, features: &Features, out: Option<&Path>, width: usize) -> Result<ExperimentTable> {
    cfg.validate()?;
    let cells = cfg.cells();
    let mut jobs: Vec<CellSpec> = Vec::new();
    let mut job_of = Vec::with_capacity(cells.len());
    for c in &cells {
        let key = CellSpec {
            action_ratio: if is_mixed(c.variant) { c.action_ratio } else { 0.0 },
            ..*c
        };
        let idx = match jobs.iter().position(|j| *j == key) {
            Some(i) => i,
            None => {
                jobs.push(key);
                jobs.len() - 1
            }
        };
        job_of.push(idx);
    }
    if cfg.stage_config(Stage::Pretrain, &cells[0]).probe_every == 0 {
        return Err(Error::Config("sweeps need probe_every > 0".into()));
    }
    log::info!("sweep: {} cells, {} runs, {} workers", cells.len(), jobs.len(), width);
    let logs: Vec<TrainLog> = run_pool(jobs.len(), width, |i| {
        let job = &jobs[i];
        let stage = cfg.stage_config(Stage::Pretrain, job);
        let dir = out.map(|o| o.join("cells").join(job.to_string()));
        let res = run_stage(&stage, features, None, dir.as_deref())?;
        let metric = res.log.final_metric().map_or(f64::NAN, |m| m.value);
        log::info!("{job}: {metric:.4} in {:.1}s", res.log.wall_clock_s);
        Ok(res.log)
    })?;
    let mut table = ExperimentTable::default();
    for (c, &j) in cells.iter().zip(&job_of) {
        let log = &logs[j];
        let m = log
            .final_metric()
            .ok_or_else(|| Error::State(format!("cell {c} produced no metric")))?;
        table.push(ExperimentRow {
            variant: c.variant,
            action_ratio: c.action_ratio,
            lambda: c.lambda,
            seed: c.seed,
            metric: m.kind,
            value: m.value,
            success: None,
            wall_clock_s: log.wall_clock_s,
        })?;
    }
    Ok(table)
}

/// Writes `table.json`, `table.csv`, `summary.json`, `ratio_series.csv` and
/// `lambda_series.csv` into `dir`.
pub fn export_table(table: &ExperimentTable, dir: &Path) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = aggregate_experiments(table)?;
    let write = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    };
    write(TABLE_FILE, serde_json::to_string_pretty(table)?)?;
    write("summary.json", serde_json::to_string_pretty(&summary)?)?;
    write_table_csv(table, dir.join("table.csv"))?;
    write_ratio_series(&summary, dir.join("ratio_series.csv"))?;
    write_lambda_series(&summary, dir.join("lambda_series.csv"))?;
    Ok(summary)
}

pub fn read_table(path: &Path) -> Result<ExperimentTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: ExperimentTable = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut checked = ExperimentTable::default();
    for r in table.rows {
        checked.push(r)?;
    }
    Ok(checked)
}

/// Probe metric and downstream success of one pre-training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub epoch: usize,
    pub probe: f64,
    /// Action accuracy or error of the fine-tuned composed policy.
    pub finetune_metric: f64,
    pub success: f64,
}

/// Pre-train once, then distill, fine-tune and roll out every evaluated
/// checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationConfig {
    pub pretrain: StageConfig,
    pub distill: StageConfig,
    pub finetune: StageConfig,
    pub rollouts: RolloutConfig,
}

impl CorrelationConfig {
    /// Default stages for `variant`; fine-tuning sees 10% of the labels at
    /// a learning rate of 1e-3.
    pub fn new(variant: Variant, env: &EnvConfig, seed: u64) -> Self {
        let mode = env.control_mode;
        let mut pretrain = StageConfig::new(Stage::Pretrain, variant, mode);
        pretrain.seed = seed;
        pretrain.probe_every = 1;
        let mut distill = StageConfig::new(Stage::Distill, variant, mode);
        distill.seed = seed;
        distill.probe_every = distill.epochs;
        let mut finetune = StageConfig::new(Stage::Finetune, variant, mode);
        finetune.seed = seed;
        finetune.ratio_seed = seed;
        finetune.action_ratio = 0.1;
        finetune.lr = 1e-3;
        finetune.probe_every = finetune.epochs;
        Self {
            pretrain,
            distill,
            finetune,
            rollouts: RolloutConfig::default(),
        }
    }
}

/// Scores every checkpoint. `features` feed pre-training, `expert` feeds
/// distillation and fine-tuning.
pub fn correlation_study(cfg: &CorrelationConfig, features: &Features, expert: &Features, width: usize) -> Result<Vec<CheckpointScore>> {
    let mut ckpts: Vec<(usize, f64, LamModel)> = Vec::new();
    run_stage_with(&cfg.pretrain, features, None, None, &mut |m, rec| {
        if let Some(p) = &rec.metric {
            ckpts.push((rec.epoch, p.value, m.clone()));
        }
        Ok(())
    })?;
    log::info!("correlation: {} checkpoints", ckpts.len());
    run_pool(ckpts.len(), width, |i| {
        let (epoch, probe, model) = &ckpts[i];
        let d = run_stage(&cfg.distill, expert, Some((model.clone(), vec![Stage::Pretrain])), None)?;
        let f = run_stage(&cfg.finetune, expert, Some((d.model, d.stages)), None)?;
        let finetune_metric = f.log.final_metric().map_or(f64::NAN, |m| m.value);
        let success = cfg.rollouts.success(&f.model, &expert.env)?;
        log::info!("checkpoint {epoch}: probe {probe:.4} success {success:.4}");
        Ok(CheckpointScore {
            epoch: *epoch,
            probe: *probe,
            finetune_metric,
            success,
        })
    })
}

pub fn probe_success_correlation(scores: &[CheckpointScore]) -> Result<f64> {
    let p: Vec<f64> = scores.iter().map(|s| s.probe).collect();
    let s: Vec<f64> = scores.iter().map(|s| s.success).collect();
    pearson(&p, &s)
}
