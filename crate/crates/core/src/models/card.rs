use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::checkpoint;
use crate::models::{LamModel, LatentMode, ModelConfig, ModelShape, Variant};

pub const CARD_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Which training stages a model has been through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Distill,
    Finetune,
}

/// Everything needed to rebuild a model around its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub variant: Variant,
    pub latent_mode: LatentMode,
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub stages: Vec<Stage>,
}

/// Writes `model.ckpt` and `manifest.json` into `dir`.
pub fn save_model(model: &LamModel, stages: &[Stage], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&model.params, dir.join(CHECKPOINT_FILE))?;
    let card = ModelCard {
        variant: model.variant,
        latent_mode: model.latent_mode,
        config: model.config.clone(),
        shape: model.shape.clone(),
        stages: stages.to_vec(),
    };
    let path = dir.join(CARD_FILE);
    fs::write(&path, serde_json::to_string_pretty(&card)?).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(LamModel, Vec<Stage>)> {
    let dir = dir.as_ref();
    let path = dir.join(CARD_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let card: ModelCard = serde_json::from_str(&text)?;
    let mut model = LamModel::new(card.variant, card.latent_mode, card.config, card.shape, 0)?;
    model.load_params(checkpoint::load(dir.join(CHECKPOINT_FILE))?)?;
    Ok((model, card.stages))
}
