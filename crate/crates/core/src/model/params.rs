//! Parameter layout shared by tensors, graph handles and optimizer buffers.
//!
//! Every container is generic over its leaf type so the same structure can
//! hold weights (`Tensor`), their recorded graph handles (`Var`), or anything
//! else aligned with them. Traversal order is fixed and defines the names.

use rand::Rng;

use super::config::{BackboneConfig, FusionMode, ModelConfig};
use crate::init::xavier_uniform;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> ConvParams<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> ConvParams<U> {
        ConvParams {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl ConvParams<Tensor> {
    /// Xavier-uniform weight `[cout, cin, k, k]`, zero bias.
    pub fn init<R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Self {
        Self {
            weight: xavier_uniform(&[cout, cin, k, k], rng).expect("conv weight shape is rank 4"),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

/// One unimodal stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams<T> {
    /// Backbone convs, per block.
    pub backbone: Vec<Vec<ConvParams<T>>>,
    /// The two side-output convs of every block.
    pub side: Vec<[ConvParams<T>; 2]>,
    /// `aggregate[i]` produces the aggregated feature of scale `i + 1` (1-based)
    /// from the coarser aggregated feature and that scale's side output.
    pub aggregate: Vec<ConvParams<T>>,
    /// 1×1 saliency head.
    pub head: ConvParams<T>,
}

impl StreamParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let w = cfg.side_channels;
        let mut cin = cfg.input_channels;
        let mut backbone = Vec::new();
        let mut side = Vec::new();
        for block in &cfg.blocks {
            let convs = block
                .iter()
                .map(|&cout| {
                    let p = ConvParams::init(cout, cin, 3, rng);
                    cin = cout;
                    p
                })
                .collect();
            backbone.push(convs);
            side.push([ConvParams::init(w, cin, 3, rng), ConvParams::init(w, w, 3, rng)]);
        }
        let aggregate = (0..cfg.blocks.len() - 1)
            .map(|_| ConvParams::init(w, 2 * w, 3, rng))
            .collect();
        let head = ConvParams::init(1, w, 1, rng);
        Self {
            backbone,
            side,
            aggregate,
            head,
        }
    }
}

impl<T> StreamParams<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> StreamParams<U> {
        StreamParams {
            backbone: self
                .backbone
                .iter()
                .enumerate()
                .map(|(b, convs)| {
                    convs
                        .iter()
                        .enumerate()
                        .map(|(c, p)| p.map(&format!("{prefix}.block{}.conv{}", b + 1, c + 1), f))
                        .collect()
                })
                .collect(),
            side: self
                .side
                .iter()
                .enumerate()
                .map(|(b, [p, q])| {
                    [
                        p.map(&format!("{prefix}.side{}.conv1", b + 1), f),
                        q.map(&format!("{prefix}.side{}.conv2", b + 1), f),
                    ]
                })
                .collect(),
            aggregate: self
                .aggregate
                .iter()
                .enumerate()
                .map(|(i, p)| p.map(&format!("{prefix}.aggregate{}", i + 1), f))
                .collect(),
            head: self.head.map(&format!("{prefix}.head"), f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (b, convs) in self.backbone.iter().enumerate() {
            for (c, p) in convs.iter().enumerate() {
                p.visit(&format!("{prefix}.block{}.conv{}", b + 1, c + 1), f);
            }
        }
        for (b, [p, q]) in self.side.iter().enumerate() {
            p.visit(&format!("{prefix}.side{}.conv1", b + 1), f);
            q.visit(&format!("{prefix}.side{}.conv2", b + 1), f);
        }
        for (i, p) in self.aggregate.iter().enumerate() {
            p.visit(&format!("{prefix}.aggregate{}", i + 1), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        for (b, convs) in self.backbone.iter_mut().enumerate() {
            for (c, p) in convs.iter_mut().enumerate() {
                p.visit_mut(&format!("{prefix}.block{}.conv{}", b + 1, c + 1), f);
            }
        }
        for (b, [p, q]) in self.side.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.side{}.conv1", b + 1), f);
            q.visit_mut(&format!("{prefix}.side{}.conv2", b + 1), f);
        }
        for (i, p) in self.aggregate.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.aggregate{}", i + 1), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

/// Fusion head. Which parts exist depends on the [`FusionMode`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    /// 3×3 conv over the concatenated stream features (switch mode).
    pub fuse: Option<ConvParams<T>>,
    /// 1×1 head: switch map in switch mode, fused saliency in concat1x1 mode.
    pub head: Option<ConvParams<T>>,
}

impl FusionParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(mode: FusionMode, width: usize, rng: &mut R) -> Self {
        match mode {
            FusionMode::Switch => Self {
                fuse: Some(ConvParams::init(width, 2 * width, 3, rng)),
                head: Some(ConvParams::init(1, width, 1, rng)),
            },
            FusionMode::Concat1x1 => Self {
                fuse: None,
                head: Some(ConvParams::init(1, 2 * width, 1, rng)),
            },
            FusionMode::RgbOnly | FusionMode::DepthOnly => Self { fuse: None, head: None },
        }
    }
}

/// All trainable parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub rgb: Option<StreamParams<T>>,
    pub depth: Option<StreamParams<T>>,
    pub fusion: FusionParams<T>,
}

impl Params<Tensor> {
    /// Draws every weight in traversal order from `rng`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let rgb = cfg.mode.has_rgb().then(|| StreamParams::init(&cfg.rgb, rng));
        let depth = cfg.mode.has_depth().then(|| StreamParams::init(&cfg.depth, rng));
        let fusion = FusionParams::init(cfg.mode, cfg.rgb.side_channels, rng);
        Self { rgb, depth, fusion }
    }
}

impl<T> Params<T> {
    /// Structure-preserving map; `f` receives each leaf's name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        Params {
            rgb: self.rgb.as_ref().map(|s| s.map("rgb", &mut f)),
            depth: self.depth.as_ref().map(|s| s.map("depth", &mut f)),
            fusion: FusionParams {
                fuse: self.fusion.fuse.as_ref().map(|p| p.map("fusion.conv", &mut f)),
                head: self.fusion.head.as_ref().map(|p| p.map("fusion.head", &mut f)),
            },
        }
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        if let Some(s) = &self.rgb {
            s.visit("rgb", &mut f);
        }
        if let Some(s) = &self.depth {
            s.visit("depth", &mut f);
        }
        if let Some(p) = &self.fusion.fuse {
            p.visit("fusion.conv", &mut f);
        }
        if let Some(p) = &self.fusion.head {
            p.visit("fusion.head", &mut f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(String, &'a mut T)) {
        if let Some(s) = &mut self.rgb {
            s.visit_mut("rgb", &mut f);
        }
        if let Some(s) = &mut self.depth {
            s.visit_mut("depth", &mut f);
        }
        if let Some(p) = &mut self.fusion.fuse {
            p.visit_mut("fusion.conv", &mut f);
        }
        if let Some(p) = &mut self.fusion.head {
            p.visit_mut("fusion.head", &mut f);
        }
    }

    /// `(name, leaf)` pairs in traversal order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut(|n, t| out.push((n, t)));
        out
    }
}
