use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// Number of convolutional blocks in every backbone.
pub const NUM_BLOCKS: usize = 5;

/// Channel widths of one unimodal backbone plus its side-output branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Output channels of each 3×3 conv, grouped per block. A 2×2 max pool
    /// sits between consecutive blocks; there is none after the last block.
    pub blocks: Vec<Vec<usize>>,
    pub input_channels: usize,
    /// Width of the side-output, aggregation and fusion convs.
    pub side_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Desk-scale widths.
    Mini,
    /// VGG-16 conv widths with 64-channel side outputs.
    Vgg16,
}

impl Preset {
    pub fn backbone(self, input_channels: usize) -> BackboneConfig {
        let (blocks, side_channels): (&[&[usize]], usize) = match self {
            Preset::Mini => (&[&[8, 8], &[16, 16], &[16, 16], &[32, 32], &[32, 32]], MINI_SIDE_CHANNELS),
            Preset::Vgg16 => (
                &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]],
                64,
            ),
        };
        BackboneConfig {
            blocks: blocks.iter().map(|b| b.to_vec()).collect(),
            input_channels,
            side_channels,
        }
    }
}

/// Side-output width used by the mini preset. The full 64 is kept for the
/// VGG-16 preset; at desk scale the full-resolution aggregation convs would
/// otherwise dominate the run time by more than an order of magnitude.
pub const MINI_SIDE_CHANNELS: usize = 8;

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mini" => Ok(Preset::Mini),
            "vgg16" => Ok(Preset::Vgg16),
            other => Err(format!("unknown preset `{other}` (expected mini or vgg16)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Mini => "mini",
            Preset::Vgg16 => "vgg16",
        })
    }
}

/// How the two unimodal predictions become the final map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Learned switch map blending the two stream predictions.
    Switch,
    /// Concatenated stream features through a single 1×1 conv, no switch map.
    Concat1x1,
    /// RGB stream only.
    RgbOnly,
    /// Depth stream only.
    DepthOnly,
}

impl FusionMode {
    pub fn has_rgb(self) -> bool {
        self != FusionMode::DepthOnly
    }

    pub fn has_depth(self) -> bool {
        self != FusionMode::RgbOnly
    }

    pub fn code(self) -> u8 {
        match self {
            FusionMode::Switch => 0,
            FusionMode::Concat1x1 => 1,
            FusionMode::RgbOnly => 2,
            FusionMode::DepthOnly => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => FusionMode::Switch,
            1 => FusionMode::Concat1x1,
            2 => FusionMode::RgbOnly,
            3 => FusionMode::DepthOnly,
            _ => return None,
        })
    }
}

impl FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "switch" => Ok(FusionMode::Switch),
            "concat1x1" => Ok(FusionMode::Concat1x1),
            "rgb_only" => Ok(FusionMode::RgbOnly),
            "depth_only" => Ok(FusionMode::DepthOnly),
            other => Err(format!(
                "unknown fusion mode `{other}` (expected switch, concat1x1, rgb_only or depth_only)"
            )),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Switch => "switch",
            FusionMode::Concat1x1 => "concat1x1",
            FusionMode::RgbOnly => "rgb_only",
            FusionMode::DepthOnly => "depth_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub rgb: BackboneConfig,
    pub depth: BackboneConfig,
    pub mode: FusionMode,
}

impl ModelConfig {
    pub fn preset(preset: Preset, mode: FusionMode) -> Self {
        Self {
            rgb: preset.backbone(3),
            depth: preset.backbone(1),
            mode,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, cfg, channels) in [("rgb", &self.rgb, 3), ("depth", &self.depth, 1)] {
            if cfg.blocks.len() != NUM_BLOCKS {
                return Err(ModelError::Config(format!(
                    "{name} backbone has {} blocks, expected {NUM_BLOCKS}",
                    cfg.blocks.len()
                )));
            }
            if cfg.input_channels != channels {
                return Err(ModelError::Config(format!(
                    "{name} backbone takes {} input channels, expected {channels}",
                    cfg.input_channels
                )));
            }
            if cfg.blocks.iter().any(|b| b.is_empty() || b.contains(&0)) || cfg.side_channels == 0 {
                return Err(ModelError::Config(format!("{name} backbone has an empty block or zero width")));
            }
        }
        if self.rgb.blocks != self.depth.blocks || self.rgb.side_channels != self.depth.side_channels {
            return Err(ModelError::Config(
                "rgb and depth backbones must share block and side widths".into(),
            ));
        }
        Ok(())
    }
}
