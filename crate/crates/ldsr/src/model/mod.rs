//! Network definitions: the differential-prior autoencoder, the
//! scale-modulated SR decoder with its continuous upsampler, the diffusion
//! denoiser with its conditioning network, and the patch discriminator.

pub mod autoencoder;
pub mod diffusion;
pub mod discriminator;
pub mod dpesr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegMode {
    Kl,
    Vq,
}

impl RegMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegMode::Kl => "kl",
            RegMode::Vq => "vq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(RegMode::Kl),
            "vq" => Ok(RegMode::Vq),
            other => Err(Error::InvalidArgument(format!(
                "reg_mode must be kl or vq, got {other}"
            ))),
        }
    }
}

/// Width and wiring knobs for every network. Defaults follow the reference
/// configuration; the toy-scale tests shrink them.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Encoder base width; the four residual groups use 1/2/2/4 times it.
    pub base_channels: usize,
    /// Channels of the differential prior representation.
    pub latent_channels: usize,
    /// Fixed width of the prior decoder pyramid.
    pub prior_channels: usize,
    /// Width of the SR branch.
    pub sr_channels: usize,
    pub imdb_per_fru: usize,
    /// Number of pyramid ratios in the continuous upsampler (ratios 1..=T).
    pub csum_levels: usize,
    pub csum_channels: usize,
    pub csum_mlp_width: usize,
    pub mod_mlp_width: usize,
    pub fusion_mlp_width: usize,
    pub unet_base: usize,
    pub emb_dim: usize,
    pub vq_codebook_size: usize,
    pub vq_commit_weight: f64,
    pub disc_base: usize,
    /// 0 selects automatically from the patch size.
    pub disc_layers: usize,
    pub reg_mode: RegMode,
    pub disable_modulation: bool,
    pub disable_sr_branch: bool,
    pub disable_prior_connections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 64,
            latent_channels: 4,
            prior_channels: 64,
            sr_channels: 64,
            imdb_per_fru: 4,
            csum_levels: 4,
            csum_channels: 32,
            csum_mlp_width: 64,
            mod_mlp_width: 64,
            fusion_mlp_width: 64,
            unet_base: 64,
            emb_dim: 256,
            vq_codebook_size: 512,
            vq_commit_weight: 0.25,
            disc_base: 64,
            disc_layers: 0,
            reg_mode: RegMode::Kl,
            disable_modulation: false,
            disable_sr_branch: false,
            disable_prior_connections: false,
        }
    }
}

impl ModelConfig {
    /// Small widths for fast tests; keeps the same wiring.
    pub fn tiny(width: usize) -> Self {
        ModelConfig {
            base_channels: width,
            latent_channels: 4,
            prior_channels: width,
            sr_channels: width,
            imdb_per_fru: 1,
            csum_levels: 4,
            csum_channels: (width / 2).max(4),
            csum_mlp_width: width.max(8),
            mod_mlp_width: width.max(8),
            fusion_mlp_width: width.max(8),
            unet_base: width,
            emb_dim: 16,
            vq_codebook_size: 32,
            vq_commit_weight: 0.25,
            disc_base: width,
            disc_layers: 0,
            reg_mode: RegMode::Kl,
            disable_modulation: false,
            disable_sr_branch: false,
            disable_prior_connections: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sr_channels % 4 != 0 {
            return Err(Error::InvalidArgument(
                "sr_channels must be divisible by 4 (distillation rate 1/4)".into(),
            ));
        }
        if self.emb_dim % 2 != 0 {
            return Err(Error::InvalidArgument("emb_dim must be even".into()));
        }
        if self.csum_levels == 0 {
            return Err(Error::InvalidArgument("csum_levels must be >= 1".into()));
        }
        if self.disable_sr_branch && self.disable_prior_connections {
            return Err(Error::InvalidArgument(
                "cannot disable both the SR branch and the prior connections".into(),
            ));
        }
        if self.vq_codebook_size < 2 {
            return Err(Error::InvalidArgument("vq codebook needs K >= 2".into()));
        }
        Ok(())
    }
}
