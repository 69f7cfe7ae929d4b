//! Training objective: saliency cross-entropy on every predicted map, switch
//! supervision against a pseudo target, and an edge-preserving term on the
//! fused map.
//!
//! Cross-entropy terms are summed over batch and pixels. The edge term is
//! averaged over the batch only.

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::kernels::Axis;
use crate::model::{FusionMode, PredictionVars};
use crate::tensor::{Tensor, TensorError};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before every log.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{what}: ground truth must be binary, found {value} at index {index}")]
    NonBinary {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{what}: target must lie in [0, 1], found {value} at index {index}")]
    TargetRange {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("prediction is missing the {0} map required by the fusion mode")]
    MissingMap(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_sal_rgb: f64,
    pub l_sal_d: f64,
    pub l_sal_fused: f64,
    pub l_sw: f64,
    pub l_edge: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_sal_rgb, self.l_sal_d, self.l_sal_fused, self.l_sw, self.l_edge, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Which terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossConfig {
    pub mode: FusionMode,
    pub edge: bool,
}

impl LossConfig {
    pub fn new(mode: FusionMode, edge: bool) -> Self {
        Self { mode, edge }
    }
}

fn check_binary(what: &'static str, y: &Tensor) -> Result<()> {
    match y.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(index) => Err(LossError::NonBinary {
            what,
            index,
            value: y.data()[index],
        }),
        None => Ok(()),
    }
}

fn check_unit(what: &'static str, y: &Tensor) -> Result<()> {
    match y.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
        Some(index) => Err(LossError::TargetRange {
            what,
            index,
            value: y.data()[index],
        }),
        None => Ok(()),
    }
}

/// `−Σ [t log p + (1 − t) log(1 − p)]` with `p` clamped; `target` is constant.
fn cross_entropy_sum(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    g.value(pred).expect_shape("cross_entropy", target.shape())?;
    let p = g.clamp(pred, EPS, 1.0 - EPS);
    let log_p = g.log(p)?;
    let q = g.rsub_scalar(1.0, p);
    let log_q = g.log(q)?;
    let t = g.constant(target.clone());
    let t_inv = g.constant(target.map(|v| 1.0 - v));
    let a = g.mul(t, log_p)?;
    let b = g.mul(t_inv, log_q)?;
    let s = g.add(a, b)?;
    let total = g.sum(s);
    Ok(g.scale(total, -1.0))
}

/// Binary cross-entropy against a binary ground truth, summed over all pixels.
pub fn bce_sum(g: &mut Graph, saliency: Var, gt: &Tensor) -> Result<Var> {
    check_binary("bce_sum", gt)?;
    cross_entropy_sum(g, saliency, gt)
}

/// Cross-entropy of the switch map against a soft target in `[0, 1]`.
pub fn switch_loss(g: &mut Graph, switch: Var, target: &Tensor) -> Result<Var> {
    check_unit("switch_loss", target)?;
    cross_entropy_sum(g, switch, target)
}

/// Pseudo switch target `S^rgb ⊙ Y + (1 − S^rgb) ⊙ (1 − Y)`.
///
/// Computed from values, so it is a constant for the graph: no gradient flows
/// back into `S^rgb` through the target.
pub fn pseudo_switch_target(s_rgb: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_binary("pseudo_switch_target", gt)?;
    Ok(s_rgb.zip_map(gt, "pseudo_switch_target", |s, y| s * y + (1.0 - s) * (1.0 - y))?)
}

/// `(1/N) Σ_n ‖∂x S_n − ∂x Y_n‖² + ‖∂y S_n − ∂y Y_n‖²` with forward differences.
pub fn edge_loss(g: &mut Graph, fused: Var, gt: &Tensor) -> Result<Var> {
    let [n, _, _, _] = g.value(fused).dims4("edge_loss")?;
    g.value(fused).expect_shape("edge_loss", gt.shape())?;
    let y = g.constant(gt.clone());
    let mut terms = Vec::with_capacity(2);
    for axis in [Axis::X, Axis::Y] {
        let ds = g.forward_diff(fused, axis)?;
        let dy = g.forward_diff(y, axis)?;
        let diff = g.sub(ds, dy)?;
        let sq = g.square(diff);
        terms.push(g.sum(sq));
    }
    let both = g.add(terms[0], terms[1])?;
    Ok(g.scale(both, 1.0 / n as f64))
}

/// Graph handles of the active loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Sums the terms active for `cfg` with unit weights. Inactive terms are
/// reported as exactly 0.
pub fn total_loss(g: &mut Graph, pred: &PredictionVars, gt: &Tensor, cfg: LossConfig) -> Result<LossVars> {
    total_loss_with_target(g, pred, gt, cfg, None)
}

/// [`total_loss`] with an explicit switch target instead of one derived
/// from the current `S^rgb`. Finite-difference checks use this to hold the
/// target fixed, which is what the detached target means for gradients.
pub fn total_loss_with_target(
    g: &mut Graph,
    pred: &PredictionVars,
    gt: &Tensor,
    cfg: LossConfig,
    switch_target: Option<&Tensor>,
) -> Result<LossVars> {
    check_binary("total_loss", gt)?;
    let mut b = LossBreakdown::default();
    let mut terms: Vec<Var> = Vec::new();
    let mut add = |g: &mut Graph, v: Var, slot: &mut f64| {
        *slot = g.value(v).item();
        terms.push(v);
    };

    match cfg.mode {
        FusionMode::RgbOnly => {
            let s = pred.rgb.ok_or(LossError::MissingMap("rgb"))?;
            let l = bce_sum(g, s, gt)?;
            add(g, l, &mut b.l_sal_rgb);
        }
        FusionMode::DepthOnly => {
            let s = pred.depth.ok_or(LossError::MissingMap("depth"))?;
            let l = bce_sum(g, s, gt)?;
            add(g, l, &mut b.l_sal_d);
        }
        FusionMode::Switch | FusionMode::Concat1x1 => {
            let s_rgb = pred.rgb.ok_or(LossError::MissingMap("rgb"))?;
            let s_d = pred.depth.ok_or(LossError::MissingMap("depth"))?;
            let l = bce_sum(g, s_rgb, gt)?;
            add(g, l, &mut b.l_sal_rgb);
            let l = bce_sum(g, s_d, gt)?;
            add(g, l, &mut b.l_sal_d);
            let l = bce_sum(g, pred.fused, gt)?;
            add(g, l, &mut b.l_sal_fused);
            if cfg.mode == FusionMode::Switch {
                let sw = pred.switch.ok_or(LossError::MissingMap("switch"))?;
                let target = match switch_target {
                    Some(t) => t.clone(),
                    None => pseudo_switch_target(g.value(s_rgb), gt)?,
                };
                let l = switch_loss(g, sw, &target)?;
                add(g, l, &mut b.l_sw);
            }
            if cfg.edge {
                let l = edge_loss(g, pred.fused, gt)?;
                add(g, l, &mut b.l_edge);
            }
        }
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    b.total = g.value(total).item();
    Ok(LossVars { total, breakdown: b })
}
