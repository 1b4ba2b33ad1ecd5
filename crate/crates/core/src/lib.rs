//! Stochastic recurrent sequence model with a backward recognition network
//! and an auxiliary backward-state reconstruction cost, built on a small
//! define-by-run reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod gradcheck;
pub mod interpolate;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod recurrent;
pub mod rng;
pub mod trainer;

pub use autodiff::{Broadcast, Gradients, Graph, Tensor, Var};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use data::{DataKind, Dataset, Observation, SequenceBatch};
pub use distributions::{Bernoulli, Categorical, DiagGaussian};
pub use error::{Error, Result};
pub use model::{LossWeights, ModelConfig, ZForcingModel};
pub use params::{ParamId, ParamSource, ParamStore};
pub use trainer::{KlAnneal, Trainer};
