use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the latent prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Hidden width of the gated feed-forward block as a multiple of `model_dim`.
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    pub cond_drop_prob: f64,
    pub predict_x_start: bool,
    pub latent_dim: usize,
    pub num_latent_blocks: usize,
    pub embed_dim: usize,
    pub num_timesteps: usize,
}

fn default_ff_mult() -> usize {
    4
}

impl Default for PriorConfig {
    /// The full-size configuration used for 512-d StyleGAN `w` latents.
    fn default() -> Self {
        PriorConfig {
            model_dim: 512,
            depth: 12,
            heads: 12,
            head_dim: 64,
            ff_mult: 4,
            cond_drop_prob: 0.2,
            predict_x_start: true,
            latent_dim: 512,
            num_latent_blocks: 1,
            embed_dim: 512,
            num_timesteps: 1000,
        }
    }
}

impl PriorConfig {
    /// Desk-scale configuration matched to the toy model stack.
    pub fn toy() -> Self {
        PriorConfig {
            model_dim: 64,
            depth: 2,
            heads: 4,
            head_dim: 16,
            ff_mult: 4,
            cond_drop_prob: 0.2,
            predict_x_start: true,
            latent_dim: 16,
            num_latent_blocks: 1,
            embed_dim: 32,
            num_timesteps: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("model_dim", self.model_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ff_mult", self.ff_mult),
            ("latent_dim", self.latent_dim),
            ("num_latent_blocks", self.num_latent_blocks),
            ("embed_dim", self.embed_dim),
            ("num_timesteps", self.num_timesteps),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::invalid(format!(
                "cond_drop_prob {} outside [0, 1]",
                self.cond_drop_prob
            )));
        }
        if !self.predict_x_start {
            return Err(Error::invalid("only x0 prediction (predict_x_start = true) is supported"));
        }
        Ok(())
    }

    /// Width of the query projection across all heads.
    pub fn attn_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn ff_inner(&self) -> usize {
        self.ff_mult * self.model_dim
    }

    /// Token count: condition, timestep, latent blocks, learned query.
    pub fn seq_len(&self) -> usize {
        self.num_latent_blocks + 3
    }

    /// Flattened latent length `num_latent_blocks × latent_dim`.
    pub fn latent_size(&self) -> usize {
        self.num_latent_blocks * self.latent_dim
    }
}
