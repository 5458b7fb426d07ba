//! Architecture description shared by the image and time-series pipelines.

use alloc::format;
use alloc::string::String;
use serde::{Deserialize, Serialize};

/// Which global-token mechanism the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single CLS token.
    Plain,
    /// CLS token plus `register_count` learnable register tokens.
    Registers,
    /// One wide CLS token of width `jumbo_multiplier * width`.
    Jumbo,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Registers => "registers",
            Variant::Jumbo => "jumbo",
        }
    }
}

/// Storage scheme for the dedicated wide-token FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumboFfnMode {
    /// One FFN per layer (the default architecture).
    PerLayer,
    /// A single FFN shared by every layer.
    Tied,
    /// Shared FFN plus one low-rank adapter per layer.
    TiedLora { rank: usize },
}

/// Full architectural description of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    /// Patch-token width D.
    pub width: usize,
    pub heads: usize,
    /// J; meaningful only for the jumbo variant.
    pub jumbo_multiplier: usize,
    /// R; meaningful only for the registers variant.
    pub register_count: usize,
    pub patch_ffn_multiplier: usize,
    /// Hidden-size factor of the dedicated wide-token FFN (m_J).
    pub jumbo_ffn_multiplier: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Drop the patch FFN of the final layer (its output is unused when
    /// only the global token feeds the head).
    pub discard_last_patch_ffn: bool,
    /// Rate applied to attention weights and FFN hidden activations when a
    /// dropout RNG is supplied at forward time. Off by default.
    pub dropout: f64,
    pub jumbo_ffn_mode: JumboFfnMode,
}

impl ModelConfig {
    /// Baseline configuration; callers override fields as needed.
    pub fn new(variant: Variant, width: usize, heads: usize) -> Self {
        ModelConfig {
            variant,
            depth: 12,
            width,
            heads,
            jumbo_multiplier: if variant == Variant::Jumbo { 6 } else { 1 },
            register_count: if variant == Variant::Registers { 16 } else { 0 },
            patch_ffn_multiplier: 4,
            jumbo_ffn_multiplier: 4,
            patch_height: 16,
            patch_width: 16,
            image_height: 224,
            image_width: 224,
            in_channels: 3,
            num_classes: 1000,
            discard_last_patch_ffn: variant == Variant::Jumbo,
            dropout: 0.0,
            jumbo_ffn_mode: JumboFfnMode::PerLayer,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.depth == 0 {
            return Err("depth must be at least 1".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.patch_height == 0
            || self.patch_width == 0
            || self.image_height % self.patch_height != 0
            || self.image_width % self.patch_width != 0
        {
            return Err(format!(
                "image {}x{} not divisible by patch {}x{}",
                self.image_height, self.image_width, self.patch_height, self.patch_width
            ));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err("channels and classes must be positive".into());
        }
        if self.patch_ffn_multiplier == 0 {
            return Err("patch_ffn_multiplier must be at least 1".into());
        }
        match self.variant {
            Variant::Jumbo => {
                if self.jumbo_multiplier == 0 {
                    return Err("jumbo variant requires jumbo_multiplier >= 1".into());
                }
                if self.jumbo_ffn_multiplier == 0 {
                    return Err("jumbo_ffn_multiplier must be at least 1".into());
                }
                if let JumboFfnMode::TiedLora { rank } = self.jumbo_ffn_mode {
                    if rank == 0 {
                        return Err("LoRA rank must be positive; use the tied mode instead".into());
                    }
                }
            }
            Variant::Plain | Variant::Registers => {
                if self.jumbo_ffn_mode != JumboFfnMode::PerLayer {
                    return Err("FFN tying applies only to the jumbo variant".into());
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / self.patch_height
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.patch_width
    }

    /// N: number of patch tokens.
    pub fn num_patches(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    /// D_pix: flattened pixel values per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_height * self.patch_width * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Width of the global representation entering the classification head:
    /// `J * D` for jumbo, `D` otherwise.
    pub fn global_width(&self) -> usize {
        match self.variant {
            Variant::Jumbo => self.jumbo_multiplier * self.width,
            _ => self.width,
        }
    }

    /// Rows the global tokens occupy in the attention sequence.
    pub fn global_rows(&self) -> usize {
        match self.variant {
            Variant::Plain => 1,
            Variant::Registers => 1 + self.register_count,
            Variant::Jumbo => self.jumbo_multiplier,
        }
    }
}
