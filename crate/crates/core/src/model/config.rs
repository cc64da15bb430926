use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters. Defaults follow the full-size recipe;
/// [`ModelConfig::toy`] is the desk-scale variant used for fast experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub memory_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub instance_decoder_layers: usize,
    pub relation_decoder_layers: usize,
    pub num_queries: usize,
    pub num_object_classes: usize,
    pub num_relation_classes: usize,
    pub patch_size: usize,
    pub backbone_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Append normalised x/y coordinate planes to the image before the patch
    /// embedder. A per-patch linear stem has no padding, so without these the
    /// token contents carry no position at all.
    pub coord_channels: bool,
    /// Separate instance and relation decoders. When false a single shared
    /// decoder feeds every head.
    pub parallel_predictor: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            memory_dim: 256,
            heads: 8,
            encoder_layers: 6,
            instance_decoder_layers: 3,
            relation_decoder_layers: 3,
            num_queries: 100,
            num_object_classes: 3,
            num_relation_classes: 4,
            patch_size: 8,
            backbone_channels: 64,
            image_height: 64,
            image_width: 64,
            ffn_dim: 2048,
            dropout: 0.1,
            coord_channels: true,
            parallel_predictor: true,
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            memory_dim: 32,
            heads: 4,
            encoder_layers: 2,
            instance_decoder_layers: 1,
            relation_decoder_layers: 1,
            num_queries: 10,
            backbone_channels: 32,
            ffn_dim: 64,
            dropout: 0.0,
            ..Self::default()
        }
    }

    /// Parses and validates a JSON config; missing fields take defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    /// Input channels seen by the patch embedder.
    pub fn input_channels(&self) -> usize {
        if self.coord_channels {
            5
        } else {
            3
        }
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.heads == 0 || self.memory_dim % self.heads != 0 {
            problems.push(format!(
                "memory_dim {} is not divisible by heads {}",
                self.memory_dim, self.heads
            ));
        }
        for (name, v) in [
            ("encoder_layers", self.encoder_layers),
            ("instance_decoder_layers", self.instance_decoder_layers),
            ("relation_decoder_layers", self.relation_decoder_layers),
            ("num_queries", self.num_queries),
            ("num_object_classes", self.num_object_classes),
            ("num_relation_classes", self.num_relation_classes),
            ("patch_size", self.patch_size),
            ("backbone_channels", self.backbone_channels),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.patch_size > 0
            && (self.image_height % self.patch_size != 0
                || self.image_width % self.patch_size != 0
                || self.image_height == 0
                || self.image_width == 0)
        {
            problems.push(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
