use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and masking hyperparameters of the two-modality model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsmoeConfig {
    /// Patch side ρ in pixels.
    pub patch_size: usize,
    pub image_side: usize,
    /// Bands of modality 𝒳 (SAR: VV, VH).
    pub channels_x: usize,
    /// Bands of modality 𝒴 (multispectral 10 m + upsampled 20 m).
    pub channels_y: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    /// Modality-specific encoder layers.
    pub enc_ms_layers: usize,
    /// Shared cross-sensor encoder layers.
    pub enc_cs_layers: usize,
    /// Decoder layers per modality.
    pub dec_layers: usize,
    pub slots: usize,
    pub experts: usize,
    pub heads: usize,
    pub dec_heads: usize,
    pub expert_hidden: usize,
    pub dec_mlp_hidden: usize,
    /// Dispatch softmax temperature τ.
    pub temperature: f64,
    pub mask_ratio: f64,
    pub d_proj: usize,
    /// Normalize reconstruction targets per patch.
    pub norm_pix: bool,
    pub seed: u64,
}

impl Default for CsmoeConfig {
    fn default() -> Self {
        CsmoeConfig {
            patch_size: 32,
            image_side: 224,
            channels_x: 2,
            channels_y: 10,
            d_enc: 768,
            d_dec: 256,
            enc_ms_layers: 4,
            enc_cs_layers: 2,
            dec_layers: 4,
            slots: 8,
            experts: 8,
            heads: 12,
            dec_heads: 8,
            expert_hidden: 768,
            dec_mlp_hidden: 1024,
            temperature: 1.0,
            mask_ratio: 0.5,
            d_proj: 128,
            norm_pix: false,
            seed: 0,
        }
    }
}

impl CsmoeConfig {
    /// The small configuration used for gradient checks and smoke training:
    /// 16-pixel images, 8-pixel patches, one layer per stage.
    pub fn miniature() -> Self {
        CsmoeConfig {
            patch_size: 8,
            image_side: 16,
            channels_x: 2,
            channels_y: 3,
            d_enc: 16,
            d_dec: 8,
            enc_ms_layers: 1,
            enc_cs_layers: 1,
            dec_layers: 1,
            slots: 2,
            experts: 2,
            heads: 2,
            dec_heads: 2,
            expert_hidden: 16,
            dec_mlp_hidden: 16,
            d_proj: 8,
            ..CsmoeConfig::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_side / self.patch_size;
        (g, g)
    }

    /// Tokens per modality.
    pub fn tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn token_dim(&self, channels: usize) -> usize {
        self.patch_size * self.patch_size * channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return fail(format!(
                "image_side {} is not a positive multiple of patch_size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.heads == 0 || self.d_enc % self.heads != 0 {
            return fail(format!("d_enc {} not divisible by heads {}", self.d_enc, self.heads));
        }
        if self.dec_heads == 0 || self.d_dec % self.dec_heads != 0 {
            return fail(format!("d_dec {} not divisible by dec_heads {}", self.d_dec, self.dec_heads));
        }
        if self.d_enc % 4 != 0 || self.d_dec % 4 != 0 {
            return fail("d_enc and d_dec must be divisible by 4 for positional tables".into());
        }
        for (name, v) in [
            ("enc_ms_layers", self.enc_ms_layers),
            ("enc_cs_layers", self.enc_cs_layers),
            ("dec_layers", self.dec_layers),
            ("slots", self.slots),
            ("experts", self.experts),
            ("channels_x", self.channels_x),
            ("channels_y", self.channels_y),
            ("expert_hidden", self.expert_hidden),
            ("dec_mlp_hidden", self.dec_mlp_hidden),
            ("d_proj", self.d_proj),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }
}
