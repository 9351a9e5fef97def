use serde::{Deserialize, Serialize};

use crate::attention::{NormPlacement, RedrawPolicy};
use crate::error::{Error, Result};
use crate::patching::Interp;
use crate::tensor::ops::Activation;

/// What the full-resolution skip carries into the last decoder.
///
/// At every coarser level the input of one encoder is the output of the
/// previous one, so the variants only differ at full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// stem input (the image) and stem output
    #[default]
    Both,
    Inputs,
    Outputs,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtNetConfig {
    pub stem_window: usize,
    pub stem_channels: usize,
    pub inner_window: usize,
    pub encoder_stride: usize,
    /// One strided encoder per entry.
    pub encoder_channels: Vec<usize>,
    /// Upsampling decoders, then the final stride-1 decoder.
    pub decoder_channels: Vec<usize>,
    pub heads: usize,
    /// Bottleneck embedding width per branch (high, low).
    pub embed_dims: Vec<usize>,
    /// Bottleneck transformer blocks per branch (high, low).
    pub depths: Vec<usize>,
    pub bottleneck_ffn_ratio: usize,
    pub performer_ffn_ratio: usize,
    /// FAVOR+ feature count; `None` means `2·d_k`.
    pub favor_features: Option<usize>,
    pub redraw: RedrawPolicy,
    pub norm: NormPlacement,
    pub activation: Activation,
    pub qkv_bias: bool,
    pub skip: SkipMode,
    pub interp: Interp,
    pub branches: usize,
}

impl Default for PtNetConfig {
    fn default() -> Self {
        Self::ptnet_s()
    }
}

impl PtNetConfig {
    fn base(depths: [usize; 2]) -> Self {
        Self {
            stem_window: 7,
            stem_channels: 32,
            inner_window: 3,
            encoder_stride: 2,
            encoder_channels: vec![32, 64, 128],
            decoder_channels: vec![64, 32, 32, 32],
            heads: 4,
            embed_dims: vec![256, 512],
            depths: depths.to_vec(),
            bottleneck_ffn_ratio: 2,
            performer_ffn_ratio: 1,
            favor_features: None,
            redraw: RedrawPolicy::Fixed,
            norm: NormPlacement::Post,
            activation: Activation::Gelu,
            qkv_bias: false,
            skip: SkipMode::Both,
            interp: Interp::Bilinear,
            branches: 2,
        }
    }

    /// One high-branch and two low-branch bottleneck blocks.
    pub fn ptnet_s() -> Self {
        Self::base([1, 2])
    }

    /// Nine bottleneck blocks in each branch.
    pub fn ptnet_l() -> Self {
        Self::base([9, 9])
    }

    /// PTNet-S layout at reduced width, sized for CPU training.
    pub fn ptnet_s_reduced() -> Self {
        Self {
            stem_channels: 16,
            encoder_channels: vec![16, 32, 64],
            decoder_channels: vec![32, 16, 16, 16],
            embed_dims: vec![64, 128],
            ..Self::ptnet_s()
        }
    }

    /// Smallest complete network: one strided encoder per branch, one
    /// bottleneck block, used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            stem_window: 3,
            stem_channels: 4,
            encoder_channels: vec![4],
            decoder_channels: vec![4, 4],
            heads: 2,
            embed_dims: vec![8, 8],
            depths: vec![1, 1],
            ..Self::ptnet_s()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ptnet_s" | "ptnet-s" => Ok(Self::ptnet_s()),
            "ptnet_l" | "ptnet-l" => Ok(Self::ptnet_l()),
            "ptnet_s_reduced" | "ptnet-s-reduced" => Ok(Self::ptnet_s_reduced()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown model preset {name:?}"))),
        }
    }

    /// Input extents must be a multiple of this (one factor of two per
    /// strided encoder plus the bottleneck).
    pub fn required_multiple(&self) -> usize {
        1 << (self.encoder_channels.len() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.encoder_channels.is_empty() {
            return fail("at least one strided encoder is required".into());
        }
        if self.decoder_channels.len() != self.encoder_channels.len() + 1 {
            return fail(format!(
                "decoder schedule {:?} must have one more entry than encoder schedule {:?}",
                self.decoder_channels, self.encoder_channels
            ));
        }
        if !(1..=2).contains(&self.branches) {
            return fail(format!("branch count must be 1 or 2, got {}", self.branches));
        }
        if self.embed_dims.len() < self.branches || self.depths.len() < self.branches {
            return fail("embed_dims and depths need one entry per branch".into());
        }
        for w in [self.stem_window, self.inner_window] {
            if w % 2 == 0 {
                return fail(format!("unfold windows must be odd, got {w}"));
            }
        }
        if self.encoder_stride < 2 {
            return fail("encoder stride must be at least 2".into());
        }
        let widths = std::iter::once(self.stem_channels)
            .chain(self.encoder_channels.iter().copied())
            .chain(self.decoder_channels.iter().copied())
            .chain(self.embed_dims.iter().take(self.branches).copied());
        for c in widths {
            if c == 0 || c % self.heads != 0 {
                return fail(format!("width {c} is not divisible by {} heads", self.heads));
            }
        }
        for &e in self.embed_dims.iter().take(self.branches) {
            if e % 2 != 0 {
                return fail(format!("embedding dim {e} must be even for positional encoding"));
            }
        }
        if self.bottleneck_ffn_ratio == 0 || self.performer_ffn_ratio == 0 {
            return fail("feed-forward ratios must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [
            PtNetConfig::ptnet_s(),
            PtNetConfig::ptnet_l(),
            PtNetConfig::ptnet_s_reduced(),
            PtNetConfig::tiny(),
        ] {
            c.validate().unwrap();
        }
        assert_eq!(PtNetConfig::ptnet_s().required_multiple(), 16);
        assert_eq!(PtNetConfig::ptnet_l().depths, [9, 9]);
        assert_eq!(PtNetConfig::ptnet_s().depths, [1, 2]);
    }

    #[test]
    fn schedule_length_mismatch() {
        let c = PtNetConfig {
            decoder_channels: vec![32, 32],
            ..PtNetConfig::ptnet_s()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn odd_embedding_rejected() {
        let c = PtNetConfig {
            heads: 2,
            embed_dims: vec![6, 10],
            ..PtNetConfig::tiny()
        };
        assert!(c.validate().is_ok());
        let c = PtNetConfig {
            heads: 1,
            embed_dims: vec![7, 8],
            ..PtNetConfig::tiny()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<PtNetConfig>(r#"{"hedas": 4}"#).unwrap_err();
        assert!(err.to_string().contains("hedas"));
    }
}
