pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod linalg;
pub mod models;
pub mod prior;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
