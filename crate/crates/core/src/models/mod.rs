//! Latent action models: frozen patch encoder, inverse and forward dynamics,
//! flow decoder, action decoder, latent policy and the optional vector
//! quantizer, wired according to a [`Variant`].

mod card;
mod encoder;
mod mlp;
pub mod suite;

pub use card::{load_model, save_model, ModelCard, Stage, CARD_FILE, CHECKPOINT_FILE};
pub use encoder::{orthonormal_rows, Encoder, DIMS_PER_PATCH};
pub use mlp::Mlp;
pub use suite::head_suite;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{ControlMode, EnvConfig, N_DISCRETE_ACTIONS};
use crate::error::{Error, Result};
use crate::math::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "LAPO")]
    Lapo,
    #[serde(rename = "CoMo")]
    Como,
    #[serde(rename = "LAOF")]
    Laof,
    #[serde(rename = "LAOF-Action")]
    LaofAction,
    #[serde(rename = "LAOM-Action")]
    LaomAction,
    #[serde(rename = "LAOF-FlowFDM")]
    LaofFlowFdm,
    #[serde(rename = "LAOF-OnlyZ")]
    LaofOnlyZ,
    #[serde(rename = "LAOF-OnlyZS")]
    LaofOnlyZs,
    #[serde(rename = "LAOF-AE")]
    LaofAe,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Lapo,
        Variant::Como,
        Variant::Laof,
        Variant::LaofAction,
        Variant::LaomAction,
        Variant::LaofFlowFdm,
        Variant::LaofOnlyZ,
        Variant::LaofOnlyZs,
        Variant::LaofAe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Lapo => "LAPO",
            Variant::Como => "CoMo",
            Variant::Laof => "LAOF",
            Variant::LaofAction => "LAOF-Action",
            Variant::LaomAction => "LAOM-Action",
            Variant::LaofFlowFdm => "LAOF-FlowFDM",
            Variant::LaofOnlyZ => "LAOF-OnlyZ",
            Variant::LaofOnlyZs => "LAOF-OnlyZS",
            Variant::LaofAe => "LAOF-AE",
        }
    }

    pub fn wiring(&self) -> Wiring {
        use FlowDecoderInput as F;
        use IdmInput as I;
        let w = |idm_input, fdm, fdm_flow_head, flow_decoder, action_decoder| Wiring {
            idm_input,
            fdm,
            fdm_flow_head,
            flow_decoder,
            action_decoder,
        };
        match self {
            Variant::Lapo => w(I::Pair, true, false, None, false),
            Variant::Como => w(I::Difference, true, false, None, false),
            Variant::Laof => w(I::Pair, true, false, Some(F::Latent), false),
            Variant::LaofAction => w(I::Pair, true, false, Some(F::Latent), true),
            Variant::LaomAction => w(I::Pair, true, false, None, true),
            Variant::LaofFlowFdm => w(I::Pair, true, true, None, false),
            Variant::LaofOnlyZ => w(I::Pair, false, false, Some(F::Latent), false),
            Variant::LaofOnlyZs => w(I::Pair, false, false, Some(F::LatentAndState), false),
            Variant::LaofAe => w(I::Flow, false, false, Some(F::Latent), false),
        }
    }

    /// Whether any flow supervision enters pre-training.
    pub fn uses_flow(&self) -> bool {
        let w = self.wiring();
        w.flow_decoder.is_some() || w.fdm_flow_head
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::usage(format!("unknown variant {s:?}")))
    }
}

/// Input of the inverse dynamics model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdmInput {
    /// `(s_t, s_{t+1})`
    Pair,
    /// `(s_t, s_{t+1} - s_t)`
    Difference,
    /// The encoded flow `f_t` alone (flow autoencoder).
    Flow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowDecoderInput {
    Latent,
    LatentAndState,
}

/// Which components a variant uses during pre-training. The latent policy and
/// the fine-tuning action decoder exist for every variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wiring {
    pub idm_input: IdmInput,
    pub fdm: bool,
    /// The FDM trunk also emits a flow-feature head.
    pub fdm_flow_head: bool,
    pub flow_decoder: Option<FlowDecoderInput>,
    pub action_decoder: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    Continuous,
    Discrete,
}

impl LatentMode {
    /// Discrete control pairs with quantized latents, continuous control
    /// with a plain bottleneck.
    pub fn for_control(mode: ControlMode) -> Self {
        match mode {
            ControlMode::Discrete5 => LatentMode::Discrete,
            ControlMode::Continuous2d => LatentMode::Continuous,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub codebook_size: usize,
    pub beta: f32,
    pub task_embed_dim: usize,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: 256,
            depth: 2,
            codebook_size: 64,
            beta: 0.25,
            task_embed_dim: 16,
            encoder_seed: 0x1a0f,
        }
    }
}

/// Shapes fixed by the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub width: usize,
    pub height: usize,
    pub n_tasks: usize,
    pub control_mode: ControlMode,
}

impl ModelShape {
    pub fn for_env(env: &EnvConfig) -> Self {
        Self {
            width: env.width,
            height: env.height,
            n_tasks: env.n_tasks,
            control_mode: env.control_mode,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.control_mode {
            ControlMode::Discrete5 => N_DISCRETE_ACTIONS,
            ControlMode::Continuous2d => 2,
        }
    }
}

/// Parameter bundle plus the variant that selects its wiring.
#[derive(Clone, Debug)]
pub struct LamModel {
    pub variant: Variant,
    pub latent_mode: LatentMode,
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub params: ParamStore,
    pub encoder: Encoder,
    encoder_id: ParamId,
    idm: Mlp,
    fdm: Option<Mlp>,
    flow_decoder: Option<Mlp>,
    pub action_decoder: Mlp,
    pub policy: Mlp,
    codebook: Option<ParamId>,
    task_embedding: ParamId,
}

/// Output of the inverse dynamics model.
pub struct Latent {
    /// Pre-quantization latent.
    pub z_e: Var,
    /// Latent passed downstream; equals `z_e` in continuous mode.
    pub z: Var,
    pub codes: Option<Vec<usize>>,
    pub vq: Option<VqLosses>,
}

pub struct VqLosses {
    pub codebook: Var,
    pub commitment: Var,
}

pub struct FdmOutput {
    pub next_state: Var,
    pub flow: Option<Var>,
}

/// Prefixes of parameter groups in the store.
pub mod prefix {
    pub const ENCODER: &str = "enc.";
    pub const IDM: &str = "idm.";
    pub const FDM: &str = "fdm.";
    pub const FLOW: &str = "flow.";
    pub const ACTION: &str = "act.";
    pub const POLICY: &str = "pol.";
    pub const CODEBOOK: &str = "vq.";
}

impl LamModel {
    pub fn new(
        variant: Variant,
        latent_mode: LatentMode,
        config: ModelConfig,
        shape: ModelShape,
        seed: u64,
    ) -> Result<Self> {
        if config.latent_dim == 0 || config.hidden == 0 || config.codebook_size == 0 {
            return Err(Error::Config("latent_dim, hidden and codebook_size must be positive".into()));
        }
        if shape.n_tasks == 0 {
            return Err(Error::Config("n_tasks must be at least 1".into()));
        }
        let encoder = Encoder::new(shape.width, shape.height, config.encoder_seed)?;
        let d = encoder.state_dim();
        let k = config.latent_dim;
        let hid = vec![config.hidden; config.depth];
        let wiring = variant.wiring();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder_id = params.insert("enc.projection", encoder.projection.clone())?;

        let idm_in = match wiring.idm_input {
            IdmInput::Pair | IdmInput::Difference => 2 * d,
            IdmInput::Flow => d,
        };
        let idm = Mlp::new(&mut params, "idm", idm_in, &hid, k, &mut rng)?;
        let fdm = if wiring.fdm {
            let out = if wiring.fdm_flow_head { 2 * d } else { d };
            Some(Mlp::new(&mut params, "fdm", d + k, &hid, out, &mut rng)?)
        } else {
            None
        };
        let flow_decoder = match wiring.flow_decoder {
            Some(FlowDecoderInput::Latent) => Some(Mlp::new(&mut params, "flow", k, &hid, d, &mut rng)?),
            Some(FlowDecoderInput::LatentAndState) => {
                Some(Mlp::new(&mut params, "flow", k + d, &hid, d, &mut rng)?)
            }
            None => None,
        };
        let action_decoder = Mlp::new(&mut params, "act", k, &hid, shape.action_dim(), &mut rng)?;
        let policy = Mlp::new(&mut params, "pol", d + config.task_embed_dim, &hid, k, &mut rng)?;
        let task_embedding = params.insert(
            "pol.task_embedding",
            Tensor::randn(&[shape.n_tasks, config.task_embed_dim], 0.1, &mut rng),
        )?;
        let codebook = match latent_mode {
            LatentMode::Discrete => {
                let a = 1.0 / config.codebook_size as f32;
                Some(params.insert(
                    "vq.codebook",
                    Tensor::uniform(&[config.codebook_size, k], -a, a, &mut rng),
                )?)
            }
            LatentMode::Continuous => None,
        };
        Ok(Self {
            variant,
            latent_mode,
            config,
            shape,
            params,
            encoder,
            encoder_id,
            idm,
            fdm,
            flow_decoder,
            action_decoder,
            policy,
            codebook,
            task_embedding,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.state_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn wiring(&self) -> Wiring {
        self.variant.wiring()
    }

    pub fn encoder_projection(&self) -> &Tensor {
        self.params.get(self.encoder_id)
    }

    pub fn codebook(&self) -> Option<&Tensor> {
        self.codebook.map(|id| self.params.get(id))
    }

    /// Replaces all parameter values with those in `store`; names and shapes
    /// must match exactly.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                self.params.len()
            )));
        }
        for (_, name, t) in self.params.iter() {
            let other = store
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if other.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: checkpoint shape {:?}, model {:?}",
                    other.shape(),
                    t.shape()
                )));
            }
        }
        let mut fresh = self.params.clone();
        for (id, name, _) in self.params.iter() {
            *fresh.get_mut(id) = store.by_name(name).unwrap().clone();
        }
        self.encoder.projection = fresh.get(self.encoder_id).clone();
        self.params = fresh;
        Ok(())
    }

    /// Parameter ids whose names start with any of `prefixes`.
    pub fn ids(&self, prefixes: &[&str]) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = prefixes.iter().flat_map(|p| self.params.ids_with_prefix(p)).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Encodes a batch of images into a `batch x d` tensor.
    pub fn encode_batch(&self, images: &[&[u8]]) -> Result<Tensor> {
        let d = self.state_dim();
        let mut data = vec![0.0; images.len() * d];
        for (img, out) in images.iter().zip(data.chunks_mut(d)) {
            self.encoder.encode_into(img, out)?;
        }
        Tensor::new(vec![images.len(), d], data)
    }

    fn net(&self, g: &mut Graph, mlp: &Mlp, x: Var, train: bool) -> Result<Var> {
        mlp.forward(g, &self.params, x, train)
    }

    /// Latent action from `(s_t, s_{t+1})`; the difference and flow variants
    /// build their own input. `f_t` is needed only by the flow autoencoder.
    pub fn idm_forward(&self, g: &mut Graph, s_t: Var, s_next: Var, f_t: Option<Var>, train: bool) -> Result<Latent> {
        let x = match self.wiring().idm_input {
            IdmInput::Pair => g.concat(&[s_t, s_next])?,
            IdmInput::Difference => {
                let diff = g.sub(s_next, s_t)?;
                g.concat(&[s_t, diff])?
            }
            IdmInput::Flow => f_t.ok_or_else(|| Error::usage("the flow autoencoder needs f_t"))?,
        };
        let z_e = self.net(g, &self.idm, x, train)?;
        match self.codebook {
            None => Ok(Latent {
                z_e,
                z: z_e,
                codes: None,
                vq: None,
            }),
            Some(cb) => {
                let (z, codes, vq) = self.quantize_var(g, z_e, cb, train)?;
                Ok(Latent {
                    z_e,
                    z,
                    codes: Some(codes),
                    vq: Some(vq),
                })
            }
        }
    }

    fn quantize_var(&self, g: &mut Graph, z_e: Var, cb: ParamId, train: bool) -> Result<(Var, Vec<usize>, VqLosses)> {
        let codebook = self.params.get(cb);
        let codes = nearest_codes(g.value(z_e), codebook)?;
        let e_value = codebook.gather_rows(&codes);
        let table = if train { g.param(&self.params, cb)? } else { g.frozen(&self.params, cb)? };
        let e = g.gather(table, &codes)?;
        let z_const = g.detach(z_e)?;
        let e_const = g.detach(e)?;
        let codebook_loss = g.mse(z_const, e)?;
        let commit = g.mse(z_e, e_const)?;
        let commitment = g.scale(commit, self.config.beta)?;
        let z_q = g.straight_through(z_e, e_value)?;
        Ok((
            z_q,
            codes,
            VqLosses {
                codebook: codebook_loss,
                commitment,
            },
        ))
    }

    /// Predicted next state (and flow features for the dual-head variant).
    pub fn fdm_forward(&self, g: &mut Graph, s_t: Var, z: Var, train: bool) -> Result<FdmOutput> {
        let fdm = self
            .fdm
            .as_ref()
            .ok_or_else(|| Error::usage(format!("{} has no forward dynamics model", self.variant)))?;
        let x = g.concat(&[s_t, z])?;
        let out = self.net(g, fdm, x, train)?;
        let d = self.state_dim();
        let (delta, flow) = if self.wiring().fdm_flow_head {
            (g.slice(out, 0, d)?, Some(g.slice(out, d, 2 * d)?))
        } else {
            (out, None)
        };
        // the network predicts the change of state
        let next_state = g.add(s_t, delta)?;
        Ok(FdmOutput { next_state, flow })
    }

    /// Predicted flow features from the dedicated decoder.
    pub fn flow_decode(&self, g: &mut Graph, z: Var, s_t: Option<Var>, train: bool) -> Result<Var> {
        let dec = self
            .flow_decoder
            .as_ref()
            .ok_or_else(|| Error::usage(format!("{} has no flow decoder (absent)", self.variant)))?;
        let x = match self.wiring().flow_decoder {
            Some(FlowDecoderInput::LatentAndState) => {
                let s = s_t.ok_or_else(|| Error::usage("this flow decoder also takes s_t"))?;
                g.concat(&[z, s])?
            }
            _ => z,
        };
        self.net(g, dec, x, train)
    }

    /// Logits over the discrete actions, or `(dx, dy)`.
    pub fn action_decode(&self, g: &mut Graph, z: Var, train: bool) -> Result<Var> {
        self.net(g, &self.action_decoder, z, train)
    }

    pub fn policy_forward(&self, g: &mut Graph, s_t: Var, task_ids: &[usize], train: bool) -> Result<Var> {
        if let Some(&bad) = task_ids.iter().find(|&&t| t >= self.shape.n_tasks) {
            return Err(Error::usage(format!(
                "task id {bad} outside the {} configured tasks",
                self.shape.n_tasks
            )));
        }
        let table = if train {
            g.param(&self.params, self.task_embedding)?
        } else {
            g.frozen(&self.params, self.task_embedding)?
        };
        let emb = g.gather(table, task_ids)?;
        let x = g.concat(&[s_t, emb])?;
        self.net(g, &self.policy, x, train)
    }
}

/// Index of the nearest codebook row for every row of `z` (squared
/// Euclidean distance, ties to the lowest index).
pub fn nearest_codes(z: &Tensor, codebook: &Tensor) -> Result<Vec<usize>> {
    if codebook.rank() != 2 || codebook.rows() == 0 {
        return Err(Error::usage("codebook must be a non-empty matrix"));
    }
    if z.rank() != 2 || z.cols() != codebook.cols() {
        return Err(Error::shape(
            "quantize",
            format!("latents {:?} vs codebook {:?}", z.shape(), codebook.shape()),
        ));
    }
    Ok((0..z.rows())
        .map(|i| {
            let zi = z.row(i);
            let mut best = (f32::INFINITY, 0);
            for j in 0..codebook.rows() {
                let d: f32 = zi.iter().zip(codebook.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect())
}

/// Quantizes `z` against `codebook`, returning the selected rows, their
/// indices and the `(codebook, commitment)` losses.
pub fn quantize(z: &Tensor, codebook: &Tensor, beta: f32) -> Result<(Tensor, Vec<usize>, f32, f32)> {
    let codes = nearest_codes(z, codebook)?;
    let zq = codebook.gather_rows(&codes);
    let n = z.numel().max(1) as f64;
    let sq: f64 = z.data().iter().zip(zq.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n;
    Ok((zq, codes, sq as f32, beta * sq as f32))
}

#[cfg(test)]
mod tests;
