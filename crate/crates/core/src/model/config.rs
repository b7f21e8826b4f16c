use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Serialized with every field explicit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BookNetConfig {
    /// Input height in pixels.
    pub height: usize,
    /// Input width in pixels (the whole two-page spread).
    pub width: usize,
    /// Transformer width `C`, also the backbone's output channels.
    pub channels: usize,
    /// Channels after the stem and after the first stride-2 stage.
    pub backbone_channels: [usize; 2],
    /// Residual blocks in each of the two stride-2 stages.
    pub backbone_blocks: [usize; 2],
    pub encoder_layers: usize,
    pub heads: usize,
    /// Decoder layers per branch in stage 1 and stage 2.
    pub decoder_layers: [usize; 2],
    pub ffn_expansion: usize,
    pub cross_page_attention: bool,
    pub use_fusion: bool,
}

impl BookNetConfig {
    /// 288×288 input, C = 256, 4 encoder layers, 2 + 2 decoder layers.
    pub fn paper() -> Self {
        BookNetConfig {
            height: 288,
            width: 288,
            channels: 256,
            backbone_channels: [64, 128],
            backbone_blocks: [2, 2],
            encoder_layers: 4,
            heads: 8,
            decoder_layers: [2, 2],
            ffn_expansion: 4,
            cross_page_attention: true,
            use_fusion: true,
        }
    }

    /// 96×96 input, C = 64, 2 encoder layers, 1 + 1 decoder layers.
    pub fn toy() -> Self {
        BookNetConfig {
            height: 96,
            width: 96,
            channels: 64,
            backbone_channels: [16, 32],
            backbone_blocks: [2, 2],
            encoder_layers: 2,
            heads: 8,
            decoder_layers: [1, 1],
            ffn_expansion: 4,
            cross_page_attention: true,
            use_fusion: true,
        }
    }

    /// 32×32 input with a handful of channels, for finite-difference checks.
    pub fn tiny() -> Self {
        BookNetConfig {
            height: 32,
            width: 32,
            channels: 8,
            backbone_channels: [4, 6],
            backbone_blocks: [1, 1],
            encoder_layers: 1,
            heads: 2,
            decoder_layers: [1, 1],
            ffn_expansion: 2,
            cross_page_attention: true,
            use_fusion: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return fail(format!(
                "input {}×{} must be positive multiples of 16",
                self.height, self.width
            ));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            ));
        }
        if self.backbone_channels.contains(&0) || self.ffn_expansion == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.backbone_blocks.contains(&0) {
            return fail("each backbone stage needs at least one block".into());
        }
        Ok(())
    }

    /// Feature grid `(H/8, W/8)`.
    pub fn feature_grid(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }

    /// Per-page query grid `(H/8, W/16)`.
    pub fn query_grid(&self) -> (usize, usize) {
        (self.height / 8, self.width / 16)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: BookNetConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for c in [BookNetConfig::paper(), BookNetConfig::toy(), BookNetConfig::tiny()] {
            c.validate().unwrap();
            assert_eq!(BookNetConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn missing_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&BookNetConfig::toy().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("heads");
        assert!(BookNetConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn invalid_extents_and_heads() {
        let mut c = BookNetConfig::toy();
        c.width = 88;
        assert!(c.validate().is_err());
        let mut c = BookNetConfig::toy();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
