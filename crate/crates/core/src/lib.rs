//! Latent action learning with optical-flow constraints on synthetic pixel
//! environments.

pub mod data;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod flow;
pub mod math;
pub mod models;
pub mod training;

pub use error::{Error, Result};
