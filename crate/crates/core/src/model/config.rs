use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent geometry, model sizes and conditioning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// Spatial compression ratio between latent tokens and condition tokens.
    pub f: usize,
    pub n_class_tokens: usize,
    pub n_classes: usize,
    pub enc_depth: usize,
    pub enc_width: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub time_embed_dim: usize,
    pub p_cond_drop: f64,
    pub max_references: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU default: 8x8x4 latents, 4/4 blocks of width 128, 8 classes.
    pub fn desk() -> Self {
        Self {
            h: 8,
            w: 8,
            d: 4,
            f: 2,
            n_class_tokens: 4,
            n_classes: 8,
            enc_depth: 4,
            enc_width: 128,
            enc_heads: 4,
            dec_depth: 4,
            dec_width: 128,
            dec_heads: 4,
            mlp_ratio: 4,
            time_embed_dim: 64,
            p_cond_drop: 0.1,
            max_references: 4,
        }
    }

    /// 4x4x2 latents, one block each side, width 16.
    pub fn micro() -> Self {
        Self {
            h: 4,
            w: 4,
            d: 2,
            f: 2,
            enc_depth: 1,
            enc_width: 16,
            enc_heads: 2,
            dec_depth: 1,
            dec_width: 16,
            dec_heads: 2,
            mlp_ratio: 2,
            time_embed_dim: 16,
            ..Self::desk()
        }
    }

    fn paper_scale(enc_depth: usize, dec_depth: usize, width: usize, heads: usize) -> Self {
        Self {
            h: 16,
            w: 16,
            d: 16,
            f: 1,
            n_class_tokens: 64,
            n_classes: 1000,
            enc_depth,
            enc_width: width,
            enc_heads: heads,
            dec_depth,
            dec_width: width,
            dec_heads: heads,
            mlp_ratio: 4,
            time_embed_dim: 256,
            p_cond_drop: 0.1,
            max_references: 4,
        }
    }

    /// Base-size block counts and widths (24/12 blocks, width 768).
    pub fn base() -> Self {
        Self::paper_scale(24, 12, 768, 12)
    }

    /// Large-size block counts and widths (32/16 blocks, width 1024).
    pub fn large() -> Self {
        Self::paper_scale(32, 16, 1024, 16)
    }

    /// Huge-size block counts and widths (40/20 blocks, width 1280).
    pub fn huge() -> Self {
        Self::paper_scale(40, 20, 1280, 16)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "desk" => Ok(Self::desk()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "huge" => Ok(Self::huge()),
            other => Err(Error::InvalidArgument(format!("unknown model preset {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return bad("latent geometry must be positive".into());
        }
        if self.f == 0 || self.h % self.f != 0 || self.w % self.f != 0 {
            return Err(Error::Compression {
                f: self.f,
                h: self.h,
                w: self.w,
            });
        }
        if self.n_class_tokens == 0 || self.n_classes == 0 {
            return bad("need at least one class and one class token".into());
        }
        for (name, width, heads) in [
            ("encoder", self.enc_width, self.enc_heads),
            ("decoder", self.dec_width, self.dec_heads),
        ] {
            if heads == 0 || width == 0 || width % heads != 0 {
                return bad(format!("{name} width {width} not divisible by {heads} heads"));
            }
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim must be even, got {}", self.time_embed_dim));
        }
        if !(0.0..1.0).contains(&self.p_cond_drop) {
            return bad(format!("p_cond_drop must be in [0, 1), got {}", self.p_cond_drop));
        }
        Ok(())
    }

    /// Tokens per latent image, `h * w`.
    pub fn latent_tokens(&self) -> usize {
        self.h * self.w
    }

    /// Tokens per condition block, `(h / f) * (w / f)`.
    pub fn cond_tokens(&self) -> usize {
        (self.h / self.f) * (self.w / self.f)
    }

    /// Channels per condition token, `d * f * f`.
    pub fn cond_dim(&self) -> usize {
        self.d * self.f * self.f
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.latent_tokens(), self.d]
    }

    pub fn cond_shape(&self) -> [usize; 2] {
        [self.cond_tokens(), self.cond_dim()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["micro", "desk", "base", "large", "huge"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("giant").is_err());
    }

    #[test]
    fn shape_laws() {
        let c = ModelConfig::desk();
        assert_eq!(c.cond_shape(), [16, 16]);
        assert_eq!(c.latent_shape(), [64, 4]);
        let b = ModelConfig::base();
        assert_eq!(b.n_class_tokens, 64);
        assert_eq!(b.cond_tokens(), 256);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::micro();
        c.f = 3;
        assert!(matches!(c.validate(), Err(Error::Compression { .. })));
        let mut c = ModelConfig::micro();
        c.enc_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::micro();
        c.p_cond_drop = 1.0;
        assert!(c.validate().is_err());
    }
}
