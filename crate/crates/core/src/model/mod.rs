//! Hierarchical spectral vision-Transformer with pluggable mixer blocks.
//!
//! The network keeps the patch's spatial grid fixed through four stages and
//! builds its hierarchy along the spectral/channel axis instead: each stage
//! projects the channels with a 1x1 token embedding and then stacks mixer
//! blocks. No positional encoding is used.

mod complexity;
pub mod layers;
mod mixer;
mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use complexity::{complexity_report, ComplexityReport};
pub use mixer::{channel_transpose, img2seq, init_mixer_block, mixer_block, seq2img};
pub use network::{token_embed, Session, SpectralVit};

/// Token-mixing sub-block used inside every Transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerKind {
    /// Residual two-layer convolution block in place of attention.
    Cnn,
    /// Spatial self-attention: tokens are the pixels of the patch.
    Ssa,
    /// Channel self-attention: tokens are the channels.
    Csa,
    /// Spatial attention plus a parallel convolution branch.
    SsaCnn,
    /// Channel attention plus a parallel convolution branch.
    CsaCnn,
}

impl MixerKind {
    pub const ALL: [MixerKind; 5] = [
        MixerKind::Cnn,
        MixerKind::Ssa,
        MixerKind::Csa,
        MixerKind::SsaCnn,
        MixerKind::CsaCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Cnn => "cnn",
            MixerKind::Ssa => "ssa",
            MixerKind::Csa => "csa",
            MixerKind::SsaCnn => "ssa-cnn",
            MixerKind::CsaCnn => "csa-cnn",
        }
    }

    pub fn has_cnn(self) -> bool {
        matches!(self, MixerKind::Cnn | MixerKind::SsaCnn | MixerKind::CsaCnn)
    }

    pub fn has_spatial_attention(self) -> bool {
        matches!(self, MixerKind::Ssa | MixerKind::SsaCnn)
    }

    pub fn has_channel_attention(self) -> bool {
        matches!(self, MixerKind::Csa | MixerKind::CsaCnn)
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::argument(format!("unknown mixer `{s}` (cnn, ssa, csa, ssa-cnn, csa-cnn)")))
    }
}

/// Multi-head attention shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || embed_dim == 0 || !embed_dim.is_multiple_of(heads) {
            return Err(Error::argument(format!(
                "attention: {heads} heads do not divide embedding dimension {embed_dim}"
            )));
        }
        Ok(AttentionConfig { embed_dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Multiplier applied to `QK^T`, `1 / sqrt(d / heads)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_MLP_RATIO: f64 = 4.0;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stage_depths: [usize; 4],
    pub stage_channels: [usize; 4],
    pub mixer: MixerKind,
    pub patch_size: usize,
    pub bands: usize,
    pub classes: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Heads for channel attention, whose embedding width is `patch_size^2`.
    /// When unset, `heads` is used if it divides `patch_size^2`, else 1.
    #[serde(default)]
    pub csa_heads: Option<usize>,
}

impl ModelSpec {
    pub fn new(
        stage_depths: [usize; 4],
        stage_channels: [usize; 4],
        mixer: MixerKind,
        patch_size: usize,
        bands: usize,
        classes: usize,
    ) -> Self {
        ModelSpec {
            stage_depths,
            stage_channels,
            mixer,
            patch_size,
            bands,
            classes,
            heads: DEFAULT_HEADS,
            mlp_ratio: DEFAULT_MLP_RATIO,
            csa_heads: None,
        }
    }

    /// Houston 2013 configuration: depths [3,2,4,2], channels [96,64,32,16],
    /// 11x11 patches over 144 bands, 15 classes.
    pub fn houston(mixer: MixerKind) -> Self {
        Self::new([3, 2, 4, 2], [96, 64, 32, 16], mixer, 11, 144, 15)
    }

    /// Botswana configuration: depths [3,3,2,2], channels [96,64,32,32],
    /// 7x7 patches over 145 bands, 14 classes.
    pub fn botswana(mixer: MixerKind) -> Self {
        Self::new([3, 3, 2, 2], [96, 64, 32, 32], mixer, 7, 145, 14)
    }

    /// Pavia University configuration: depths [2,2,6,2], channels [96,64,32,16],
    /// 11x11 patches over 103 bands, 9 classes.
    pub fn pavia_university(mixer: MixerKind) -> Self {
        Self::new([2, 2, 6, 2], [96, 64, 32, 16], mixer, 11, 103, 9)
    }

    pub fn tokens(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn channel_attention_heads(&self) -> usize {
        match self.csa_heads {
            Some(h) => h,
            None if self.tokens().is_multiple_of(self.heads) => self.heads,
            None => 1,
        }
    }

    /// Hidden width of the MLP for `features` inputs.
    pub fn mlp_hidden(&self, features: usize) -> usize {
        ((features as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.contains(&0) {
            return Err(Error::argument("stage depths must be positive"));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::argument("stage channels must be positive"));
        }
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(Error::argument(format!("patch size {} must be odd", self.patch_size)));
        }
        if self.bands == 0 {
            return Err(Error::argument("band count must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::argument("need at least two classes"));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            return Err(Error::argument("mlp ratio must be positive"));
        }
        if self.heads == 0 {
            return Err(Error::argument("heads must be positive"));
        }
        if self.mixer.has_spatial_attention() {
            for &c in &self.stage_channels {
                AttentionConfig::new(c, self.heads)?;
            }
        }
        if self.mixer.has_channel_attention() {
            AttentionConfig::new(self.tokens(), self.channel_attention_heads())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixer_names_round_trip() {
        for k in MixerKind::ALL {
            assert_eq!(k.name().parse::<MixerKind>().unwrap(), k);
        }
        assert!("mlp".parse::<MixerKind>().is_err());
    }

    #[test]
    fn attention_scale_uses_head_dim() {
        let cfg = AttentionConfig::new(16, 4).unwrap();
        assert_eq!(cfg.scale(), 0.5);
        assert!(AttentionConfig::new(10, 4).is_err());
    }

    #[test]
    fn validation() {
        let mut spec = ModelSpec::new([1; 4], [8; 4], MixerKind::Ssa, 5, 6, 3);
        spec.validate().unwrap();
        spec.patch_size = 4;
        assert!(spec.validate().is_err());
        spec.patch_size = 5;
        spec.stage_channels = [8, 8, 6, 8];
        assert!(spec.validate().is_err());
        spec.mixer = MixerKind::Cnn;
        spec.validate().unwrap();
        spec.mixer = MixerKind::Csa;
        spec.csa_heads = Some(2);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn channel_heads_fall_back_to_one() {
        let spec = ModelSpec::houston(MixerKind::Csa);
        assert_eq!(spec.channel_attention_heads(), 1);
        let mut spec = ModelSpec::new([1; 4], [8; 4], MixerKind::Csa, 5, 6, 3);
        spec.heads = 5;
        assert_eq!(spec.channel_attention_heads(), 5);
    }
}
