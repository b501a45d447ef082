//! The latent prior: a transformer denoiser conditioned on an embedding.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{version_string, PriorCheckpoint, Provenance, TrainState, CHECKPOINT_MAGIC};
pub use config::PriorConfig;
pub use network::{
    drop_condition, mse_loss, timestep_features, Cache, ParamInfo, PriorInputs, PriorNetwork,
};
