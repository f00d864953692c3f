use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Architectural hyperparameters shared by the backbone, the MAE decoder
/// and the segmentation heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    /// 0-based indices of the blocks whose outputs feed the head.
    pub tap_blocks: [usize; 4],
    pub n_classes: usize,
    /// Channel width of the UperNet head.
    pub head_channels: usize,
    /// Width of the first UNet level; doubles per level.
    pub unet_base_channels: usize,
}

/// Hidden width of the transformer MLP relative to the token width.
pub const MLP_RATIO: usize = 4;

impl ModelConfig {
    /// ViT-B/16 MAE with UperNet head at 224×224.
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            in_channels: 1,
            embed_dim: 768,
            encoder_blocks: 12,
            encoder_heads: 12,
            decoder_dim: 512,
            decoder_blocks: 8,
            decoder_heads: 16,
            mask_ratio: 0.75,
            tap_blocks: [3, 5, 7, 11],
            n_classes: 2,
            head_channels: 256,
            unet_base_channels: 64,
        }
    }

    /// Desk-scale model with the same code paths.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            in_channels: 1,
            embed_dim: 64,
            encoder_blocks: 4,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_blocks: 2,
            decoder_heads: 4,
            mask_ratio: 0.75,
            tap_blocks: [0, 1, 2, 3],
            n_classes: 2,
            head_channels: 32,
            unet_base_channels: 16,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or tiny)"))),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Length of one flattened patch.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.in_channels == 0 || self.n_classes < 2 || self.head_channels == 0 || self.unet_base_channels == 0 {
            return fail("in_channels, head_channels and unet_base_channels must be positive, n_classes >= 2".into());
        }
        if self.encoder_heads == 0 || !self.embed_dim.is_multiple_of(self.encoder_heads) {
            return fail(format!(
                "embed_dim {} not divisible by encoder_heads {}",
                self.embed_dim, self.encoder_heads
            ));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return fail(format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) || !self.decoder_dim.is_multiple_of(4) {
            return fail("embed_dim and decoder_dim must be divisible by 4".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        let taps = self.tap_blocks;
        if taps.windows(2).any(|w| w[0] >= w[1]) || taps[3] >= self.encoder_blocks {
            return fail(format!(
                "tap_blocks {taps:?} must be strictly increasing and below encoder_blocks {}",
                self.encoder_blocks
            ));
        }
        Ok(())
    }

    /// `key=value` pairs, one per field.
    pub fn to_record(&self) -> BTreeMap<String, String> {
        let t = self.tap_blocks;
        [
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("encoder_blocks", self.encoder_blocks.to_string()),
            ("encoder_heads", self.encoder_heads.to_string()),
            ("decoder_dim", self.decoder_dim.to_string()),
            ("decoder_blocks", self.decoder_blocks.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("tap_blocks", format!("{},{},{},{}", t[0], t[1], t[2], t[3])),
            ("n_classes", self.n_classes.to_string()),
            ("head_channels", self.head_channels.to_string()),
            ("unet_base_channels", self.unet_base_channels.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key=value` override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "encoder_blocks" => self.encoder_blocks = num(key, value)?,
            "encoder_heads" => self.encoder_heads = num(key, value)?,
            "decoder_dim" => self.decoder_dim = num(key, value)?,
            "decoder_blocks" => self.decoder_blocks = num(key, value)?,
            "decoder_heads" => self.decoder_heads = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "n_classes" => self.n_classes = num(key, value)?,
            "head_channels" => self.head_channels = num(key, value)?,
            "unet_base_channels" => self.unet_base_channels = num(key, value)?,
            "tap_blocks" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num(key, p))
                    .collect::<Result<_>>()?;
                self.tap_blocks = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("tap_blocks needs 4 indices, got {value:?}")))?;
            }
            _ => return Err(Error::Config(format!("unknown model config key {key:?}"))),
        }
        Ok(())
    }

    /// Rebuilds a config from [`ModelConfig::to_record`] output. Every
    /// field must be present.
    pub fn from_record(record: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::tiny();
        for key in Self::tiny().to_record().keys() {
            let value = record
                .get(key)
                .ok_or_else(|| Error::Format(format!("config record lacks {key}")))?;
            cfg.set(key, value).map_err(|e| Error::Format(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_record() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
