//! The two-stream network and its switch-map fusion head.
//!
//! Each stream runs a five-block conv backbone. Every block output `A_i`
//! feeds a side branch (two 3×3 convs + ReLU) whose result is upsampled to
//! the input resolution, giving `F_i`. Side outputs are then aggregated
//! coarse-to-fine, `F̃_5 = F_5` and `F̃_i = g([F̃_{i+1}, F_i])`, and a 1×1 head
//! with a sigmoid turns `F̃_1` into the stream's saliency map.
//!
//! In switch mode the fusion head convolves `[F̃_1^rgb, F̃_1^d]`, predicts a
//! switch map `SW` and blends `SW ⊙ S^rgb + (1 − SW) ⊙ S^d`.

pub mod checkpoint;
mod config;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{BackboneConfig, FusionMode, ModelConfig, Preset, MINI_SIDE_CHANNELS, NUM_BLOCKS};
pub use params::{ConvParams, FusionParams, Params, StreamParams};

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Spatial sizes must be divisible by this (four 2×2 pools).
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    pub rgb: Option<Var>,
    pub depth: Option<Var>,
    pub switch: Option<Var>,
    pub fused: Var,
}

/// Maps produced by one forward pass, each `[N, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub rgb: Option<Tensor>,
    pub depth: Option<Tensor>,
    pub switch: Option<Tensor>,
    pub fused: Tensor,
}

impl PredictionVars {
    pub fn values(&self, g: &Graph) -> Prediction {
        Prediction {
            rgb: self.rgb.map(|v| g.value(v).clone()),
            depth: self.depth.map(|v| g.value(v).clone()),
            switch: self.switch.map(|v| g.value(v).clone()),
            fused: g.value(self.fused).clone(),
        }
    }
}

/// Saliency map and last aggregated feature of one stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamOutput {
    pub saliency: Var,
    pub features: Var,
}

impl Model {
    /// Builds a model with Xavier-uniform weights and zero biases drawn from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn mode(&self) -> FusionMode {
        self.config.mode
    }

    pub fn num_parameters(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Number of named parameter tensors.
    pub fn num_groups(&self) -> usize {
        self.params.named().len()
    }

    /// Records every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Params<Var> {
        self.params.map(|_, t| g.param(t.clone()))
    }

    /// Records the full forward pass. `rgb` is `[N,3,H,W]`, `depth` `[N,1,H,W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Params<Var>,
        rgb: &Tensor,
        depth: &Tensor,
    ) -> Result<PredictionVars, ModelError> {
        let (_, h, w) = check_inputs(rgb, depth)?;
        let rgb_out = match &bound.rgb {
            Some(s) => {
                let x = g.constant(rgb.clone());
                Some(stream_forward(g, s, x, (h, w))?)
            }
            None => None,
        };
        let depth_out = match &bound.depth {
            Some(s) => {
                let x = g.constant(depth.clone());
                Some(stream_forward(g, s, x, (h, w))?)
            }
            None => None,
        };
        let (switch, fused) = fusion_forward(g, self.mode(), &bound.fusion, rgb_out, depth_out)?;
        Ok(PredictionVars {
            rgb: rgb_out.map(|o| o.saliency),
            depth: depth_out.map(|o| o.saliency),
            switch,
            fused,
        })
    }

    /// Inference: runs the forward pass and returns the maps.
    pub fn predict(&self, rgb: &Tensor, depth: &Tensor) -> Result<Prediction, ModelError> {
        let mut g = Graph::new();
        let bound = self.params.map(|_, t| g.constant(t.clone()));
        let vars = self.forward(&mut g, &bound, rgb, depth)?;
        Ok(vars.values(&g))
    }
}

fn check_inputs(rgb: &Tensor, depth: &Tensor) -> Result<(usize, usize, usize), ModelError> {
    let [n, c, h, w] = rgb.dims4("forward")?;
    let [nd, cd, hd, wd] = depth.dims4("forward")?;
    if c != 3 || cd != 1 {
        return Err(ModelError::Input(format!(
            "expected 3 rgb channels and 1 depth channel, got {c} and {cd}"
        )));
    }
    if (n, h, w) != (nd, hd, wd) {
        return Err(ModelError::Input(format!(
            "rgb {:?} and depth {:?} are not aligned",
            rgb.shape(),
            depth.shape()
        )));
    }
    check_size(h, w)?;
    Ok((n, h, w))
}

pub fn check_size(h: usize, w: usize) -> Result<(), ModelError> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(ModelError::Input(format!(
            "spatial size {h}x{w} is not a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

/// `relu(conv3x3(x))`, the `g(·)` building block.
fn conv_relu(g: &mut Graph, p: &ConvParams<Var>, x: Var) -> Result<Var, TensorError> {
    let y = g.conv2d(x, p.weight, p.bias, 1, 1)?;
    Ok(g.relu(y))
}

/// One unimodal stream: backbone, side outputs, progressive aggregation, head.
pub fn stream_forward(
    g: &mut Graph,
    p: &StreamParams<Var>,
    input: Var,
    (h, w): (usize, usize),
) -> Result<StreamOutput, ModelError> {
    let [_, _, ih, iw] = g.value(input).dims4("stream_forward")?;
    check_size(ih, iw)?;

    let mut a = input;
    let mut side = Vec::with_capacity(p.backbone.len());
    for (b, block) in p.backbone.iter().enumerate() {
        if b > 0 {
            a = g.max_pool2(a)?;
        }
        for conv in block {
            a = conv_relu(g, conv, a)?;
        }
        let [c1, c2] = &p.side[b];
        let s = conv_relu(g, c1, a)?;
        let s = conv_relu(g, c2, s)?;
        let [_, _, sh, sw] = g.value(s).dims4("stream_forward")?;
        let f = if (sh, sw) == (h, w) { s } else { g.upsample(s, h, w)? };
        side.push(f);
    }

    let mut agg = *side.last().expect("five blocks");
    for i in (0..side.len() - 1).rev() {
        let cat = g.concat_channels(agg, side[i])?;
        agg = conv_relu(g, &p.aggregate[i], cat)?;
    }
    let logits = g.conv2d(agg, p.head.weight, p.head.bias, 1, 0)?;
    Ok(StreamOutput {
        saliency: g.sigmoid(logits),
        features: agg,
    })
}

/// `SW ⊙ S^rgb + (1 − SW) ⊙ S^d`.
pub fn blend(g: &mut Graph, switch: Var, s_rgb: Var, s_depth: Var) -> Result<Var, TensorError> {
    let a = g.mul(switch, s_rgb)?;
    let inv = g.rsub_scalar(1.0, switch);
    let b = g.mul(inv, s_depth)?;
    g.add(a, b)
}

/// Fusion head. Returns `(SW, S^fused)`; `SW` exists only in switch mode.
pub fn fusion_forward(
    g: &mut Graph,
    mode: FusionMode,
    p: &FusionParams<Var>,
    rgb: Option<StreamOutput>,
    depth: Option<StreamOutput>,
) -> Result<(Option<Var>, Var), ModelError> {
    let missing = |what: &str| ModelError::Config(format!("{mode} fusion needs {what}"));
    match mode {
        FusionMode::RgbOnly => Ok((None, rgb.ok_or_else(|| missing("the rgb stream"))?.saliency)),
        FusionMode::DepthOnly => Ok((None, depth.ok_or_else(|| missing("the depth stream"))?.saliency)),
        FusionMode::Switch | FusionMode::Concat1x1 => {
            let r = rgb.ok_or_else(|| missing("the rgb stream"))?;
            let d = depth.ok_or_else(|| missing("the depth stream"))?;
            let head = p.head.as_ref().ok_or_else(|| missing("a 1x1 head"))?;
            let cat = g.concat_channels(r.features, d.features)?;
            if mode == FusionMode::Concat1x1 {
                let logits = g.conv2d(cat, head.weight, head.bias, 1, 0)?;
                return Ok((None, g.sigmoid(logits)));
            }
            let fuse = p.fuse.as_ref().ok_or_else(|| missing("a fusion conv"))?;
            let f_sw = conv_relu(g, fuse, cat)?;
            let logits = g.conv2d(f_sw, head.weight, head.bias, 1, 0)?;
            let sw = g.sigmoid(logits);
            let fused = blend(g, sw, r.saliency, d.saliency)?;
            Ok((Some(sw), fused))
        }
    }
}
