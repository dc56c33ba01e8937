//! Randomized finite-difference sweep over every model head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::ControlMode;
use crate::error::Result;
use crate::math::suite::SUITE_EPS;
use crate::math::{param_difference_check, Graph, ParamStore, SuiteEntry, Tensor, Var};
use crate::models::{prefix, LamModel, LatentMode, ModelConfig, ModelShape, Variant};

/// Coordinates probed per parameter tensor and case.
const COORDS: usize = 3;

/// 8x8 frames give a single patch, so `d = 16`.
fn tiny(variant: Variant, mode: LatentMode, control: ControlMode, seed: u64) -> Result<LamModel> {
    let config = ModelConfig {
        latent_dim: 4,
        hidden: 6,
        depth: 2,
        codebook_size: 5,
        task_embed_dim: 3,
        ..ModelConfig::default()
    };
    let shape = ModelShape {
        width: 8,
        height: 8,
        n_tasks: 3,
        control_mode: control,
    };
    LamModel::new(variant, mode, config, shape, seed)
}

struct Case {
    s: Tensor,
    s_next: Tensor,
    flow: Tensor,
    target_d: Tensor,
    target_k: Tensor,
    target_a: Tensor,
    tasks: Vec<usize>,
    labels: Vec<usize>,
}

impl Case {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..=4);
        let d = 16;
        Self {
            s: Tensor::randn(&[n, d], 1.0, rng),
            s_next: Tensor::randn(&[n, d], 1.0, rng),
            flow: Tensor::randn(&[n, d], 1.0, rng),
            target_d: Tensor::randn(&[n, d], 1.0, rng),
            target_k: Tensor::randn(&[n, 4], 1.0, rng),
            target_a: Tensor::randn(&[n, 2], 1.0, rng),
            tasks: (0..n).map(|_| rng.random_range(0..3)).collect(),
            labels: (0..n).map(|_| rng.random_range(0..5)).collect(),
        }
    }
}

fn mse_to(g: &mut Graph, v: Var, t: &Tensor) -> Result<Var> {
    let t = g.input(t.clone())?;
    g.mse(v, t)
}

type Loss = fn(&mut Graph, &LamModel, &Case) -> Result<Var>;

struct Head {
    name: &'static str,
    variant: Variant,
    mode: LatentMode,
    control: ControlMode,
    prefixes: &'static [&'static str],
    loss: Loss,
}

fn idm_loss(g: &mut Graph, m: &LamModel, c: &Case) -> Result<Var> {
    let s = g.input(c.s.clone())?;
    let n = g.input(c.s_next.clone())?;
    let f = g.input(c.flow.clone())?;
    let lat = m.idm_forward(g, s, n, Some(f), true)?;
    mse_to(g, lat.z, &c.target_k)
}

const HEADS: [Head; 11] = [
    Head {
        name: "idm",
        variant: Variant::Laof,
        mode: LatentMode::Continuous,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::IDM],
        loss: idm_loss,
    },
    Head {
        name: "idm (difference input)",
        variant: Variant::Como,
        mode: LatentMode::Continuous,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::IDM],
        loss: idm_loss,
    },
    Head {
        name: "idm (flow input)",
        variant: Variant::LaofAe,
        mode: LatentMode::Continuous,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::IDM],
        loss: idm_loss,
    },
    Head {
        name: "quantizer",
        variant: Variant::Laof,
        mode: LatentMode::Discrete,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::IDM, prefix::CODEBOOK],
        loss: |g, m, c| {
            let s = g.input(c.s.clone())?;
            let n = g.input(c.s_next.clone())?;
            let vq = m.idm_forward(g, s, n, None, true)?.vq.expect("discrete");
            g.add(vq.codebook, vq.commitment)
        },
    },
    Head {
        name: "fdm",
        variant: Variant::Lapo,
        mode: LatentMode::Continuous,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::IDM, prefix::FDM],
        loss: |g, m, c| {
            let s = g.input(c.s.clone())?;
            let n = g.input(c.s_next.clone())?;
            let lat = m.idm_forward(g, s, n, None, true)?;
            let out = m.fdm_forward(g, s, lat.z, true)?;
            g.mse(out.next_state, n)
        },
    },
    Head {
        name: "fdm (dual head)",
        variant: Variant::LaofFlowFdm,
        mode: LatentMode::Continuous,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::IDM, prefix::FDM],
        loss: |g, m, c| {
            let s = g.input(c.s.clone())?;
            let n = g.input(c.s_next.clone())?;
            let lat = m.idm_forward(g, s, n, None, true)?;
            let out = m.fdm_forward(g, s, lat.z, true)?;
            let a = g.mse(out.next_state, n)?;
            let b = mse_to(g, out.flow.expect("dual head"), &c.flow)?;
            g.add(a, b)
        },
    },
    Head {
        name: "flow decoder (z)",
        variant: Variant::Laof,
        mode: LatentMode::Continuous,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::IDM, prefix::FLOW],
        loss: flow_loss,
    },
    Head {
        name: "flow decoder (z, s)",
        variant: Variant::LaofOnlyZs,
        mode: LatentMode::Continuous,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::IDM, prefix::FLOW],
        loss: flow_loss,
    },
    Head {
        name: "action decoder (logits)",
        variant: Variant::LaofAction,
        mode: LatentMode::Continuous,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::IDM, prefix::ACTION],
        loss: |g, m, c| {
            let s = g.input(c.s.clone())?;
            let n = g.input(c.s_next.clone())?;
            let lat = m.idm_forward(g, s, n, None, true)?;
            let logits = m.action_decode(g, lat.z, true)?;
            g.softmax_cross_entropy(logits, &c.labels)
        },
    },
    Head {
        name: "action decoder (continuous)",
        variant: Variant::LaofAction,
        mode: LatentMode::Continuous,
        control: ControlMode::Continuous2d,
        prefixes: &[prefix::IDM, prefix::ACTION],
        loss: |g, m, c| {
            let s = g.input(c.s.clone())?;
            let n = g.input(c.s_next.clone())?;
            let lat = m.idm_forward(g, s, n, None, true)?;
            let a = m.action_decode(g, lat.z, true)?;
            mse_to(g, a, &c.target_a)
        },
    },
    Head {
        name: "latent policy",
        variant: Variant::Laof,
        mode: LatentMode::Continuous,
        control: ControlMode::Discrete5,
        prefixes: &[prefix::POLICY],
        loss: |g, m, c| {
            let s = g.input(c.s.clone())?;
            let z = m.policy_forward(g, s, &c.tasks, true)?;
            mse_to(g, z, &c.target_k)
        },
    },
];

fn flow_loss(g: &mut Graph, m: &LamModel, c: &Case) -> Result<Var> {
    let s = g.input(c.s.clone())?;
    let n = g.input(c.s_next.clone())?;
    let lat = m.idm_forward(g, s, n, None, true)?;
    let f = m.flow_decode(g, lat.z, Some(s), true)?;
    mse_to(g, f, &c.target_d)
}

/// Runs `cases` random instances (fresh weights and inputs) of every head.
pub fn head_suite(cases: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HEADS
        .iter()
        .map(|h| {
            let mut worst = 0.0f32;
            for _ in 0..cases {
                let m = tiny(h.variant, h.mode, h.control, rng.random())?;
                let case = Case::new(&mut rng);
                let ids = m.ids(h.prefixes);
                let f = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
                    let mut mm = m.clone();
                    mm.params = store.clone();
                    (h.loss)(g, &mm, &case)
                };
                worst = worst.max(param_difference_check(&m.params, &ids, f, SUITE_EPS, COORDS)?);
            }
            Ok(SuiteEntry {
                name: h.name.to_string(),
                cases,
                max_rel_err: worst,
            })
        })
        .collect()
}
