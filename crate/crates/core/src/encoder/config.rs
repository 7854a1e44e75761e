use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jetdata::{DEFAULT_MAX_PARTICLES, N_FEATURES};

/// Size presets of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPreset {
    /// Published architecture: 128-d latent, 8 particle and 2 class blocks.
    Paper,
    /// Reduced width and depth for single-core training.
    Desk,
    /// Minimal network for tests and smoke runs.
    Smoke,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_features: usize,
    pub embed_hidden: usize,
    /// Number of linear layers in the particle embedding MLP.
    pub embed_layers: usize,
    pub latent_dim: usize,
    pub n_particle_blocks: usize,
    pub n_class_blocks: usize,
    pub n_heads: usize,
    pub ffn_expansion: usize,
    pub interaction_features: usize,
    pub interaction_hidden: usize,
    pub interaction_layers: usize,
    pub use_geglu: bool,
    pub droppath_rate: f64,
    pub residual_scale: f64,
    pub wide_readout: bool,
    pub readout_hidden: usize,
    pub readout_dropout: f64,
    pub n_classes: usize,
    pub proj_dim: usize,
    pub mpm_hidden: usize,
    pub vae_latent: usize,
    pub vae_hidden: usize,
    /// Longest jet the VAE decoder's rank table covers.
    pub max_particles: usize,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            input_features: N_FEATURES,
            embed_hidden: 512,
            embed_layers: 3,
            latent_dim: 128,
            n_particle_blocks: 8,
            n_class_blocks: 2,
            n_heads: 8,
            ffn_expansion: 4,
            interaction_features: 4,
            interaction_hidden: 64,
            interaction_layers: 4,
            use_geglu: false,
            droppath_rate: 0.0,
            residual_scale: 1.0,
            wide_readout: false,
            readout_hidden: 128,
            readout_dropout: 0.1,
            n_classes: 7,
            proj_dim: 128,
            mpm_hidden: 256,
            vae_latent: 32,
            vae_hidden: 128,
            max_particles: DEFAULT_MAX_PARTICLES,
        }
    }

    pub fn desk() -> Self {
        Self {
            embed_hidden: 128,
            latent_dim: 64,
            n_particle_blocks: 3,
            n_class_blocks: 1,
            n_heads: 4,
            interaction_hidden: 32,
            readout_hidden: 64,
            proj_dim: 64,
            mpm_hidden: 128,
            vae_latent: 16,
            vae_hidden: 64,
            ..Self::paper()
        }
    }

    pub fn smoke() -> Self {
        Self {
            embed_hidden: 64,
            latent_dim: 32,
            n_particle_blocks: 2,
            n_class_blocks: 1,
            n_heads: 4,
            interaction_hidden: 16,
            readout_hidden: 32,
            proj_dim: 32,
            mpm_hidden: 64,
            vae_latent: 8,
            vae_hidden: 32,
            ..Self::paper()
        }
    }

    pub fn preset(p: EncoderPreset) -> Self {
        match p {
            EncoderPreset::Paper => Self::paper(),
            EncoderPreset::Desk => Self::desk(),
            EncoderPreset::Smoke => Self::smoke(),
        }
    }

    /// The architectural variant: GEGLU feed-forward with a wider expansion,
    /// DropPath with residual scaling and a two-layer readout.
    pub fn modified(self) -> Self {
        Self {
            use_geglu: true,
            ffn_expansion: 6,
            droppath_rate: 0.1,
            residual_scale: 0.9,
            wide_readout: true,
            readout_hidden: self.latent_dim,
            ..self
        }
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.latent_dim * self.ffn_expansion
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_features", self.input_features),
            ("embed_hidden", self.embed_hidden),
            ("latent_dim", self.latent_dim),
            ("n_heads", self.n_heads),
            ("ffn_expansion", self.ffn_expansion),
            ("interaction_features", self.interaction_features),
            ("interaction_hidden", self.interaction_hidden),
            ("readout_hidden", self.readout_hidden),
            ("n_classes", self.n_classes),
            ("proj_dim", self.proj_dim),
            ("mpm_hidden", self.mpm_hidden),
            ("vae_latent", self.vae_latent),
            ("vae_hidden", self.vae_hidden),
            ("max_particles", self.max_particles),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if !self.latent_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "latent_dim {} not divisible by n_heads {}",
                self.latent_dim, self.n_heads
            )));
        }
        if self.embed_layers < 1 || self.interaction_layers < 1 {
            return Err(Error::Config("embedding and interaction stacks need at least one layer".into()));
        }
        if self.n_class_blocks < 1 {
            return Err(Error::Config("at least one class-attention block is required".into()));
        }
        for (name, r) in [("droppath_rate", self.droppath_rate), ("readout_dropout", self.readout_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1)")));
            }
        }
        if !(self.residual_scale > 0.0) {
            return Err(Error::Config(format!("residual_scale {} must be positive", self.residual_scale)));
        }
        Ok(())
    }
}
