//! Finite-difference audit of every parameter gradient of the full model.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::losses::{pseudo_switch_target, total_loss_with_target, LossConfig, LossError};
use crate::model::{FusionMode, Model, ModelConfig, ModelError, Preset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub size: usize,
    pub batch: usize,
    pub mode: FusionMode,
    /// Coordinates compared per parameter tensor (all of them if the tensor is smaller).
    pub coords_per_group: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Test fixture: scales the analytic gradient of the named group before
    /// comparison, standing in for a broken backward pass.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 16,
            batch: 2,
            mode: FusionMode::Switch,
            coords_per_group: 6,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates set aside because the perturbation crossed a ReLU, pooling
    /// or clamp boundary and the two derivatives disagreed.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }
}

/// Extra tenfold step reductions tried when a perturbation crosses a kink.
const REFINEMENTS: i32 = 2;

struct Problem {
    model: Model,
    rgb: Tensor,
    depth: Tensor,
    gt: Tensor,
    loss: LossConfig,
    /// Switch target at the unperturbed parameters, held fixed.
    switch_target: Option<Tensor>,
}

impl Problem {
    /// Loss value and the activation pattern it was computed under.
    fn eval(&self) -> Result<(f64, u64), LossError> {
        let mut g = Graph::new();
        let bound = self.model.params.map(|_, t| g.constant(t.clone()));
        let pred = self.model.forward(&mut g, &bound, &self.rgb, &self.depth).map_err(model_err)?;
        let l = total_loss_with_target(&mut g, &pred, &self.gt, self.loss, self.switch_target.as_ref())?;
        Ok((g.value(l.total).item(), g.activation_signature()))
    }
}

fn model_err(e: ModelError) -> LossError {
    match e {
        ModelError::Tensor(t) => LossError::Tensor(t),
        other => panic!("gradcheck model is valid by construction: {other}"),
    }
}

/// Compares analytic gradients with central differences on a random batch.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::build(ModelConfig::preset(Preset::Mini, cfg.mode), cfg.seed)?;
    // Zero biases put every unit with an all-zero receptive field exactly on
    // a ReLU kink, where central differences cannot agree with any one-sided
    // derivative. Small random biases move the check to a generic point.
    model.params.visit_mut(|name, t| {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
        }
    });
    let (n, s) = (cfg.batch, cfg.size);
    crate::model::check_size(s, s)?;
    let rgb = Tensor::from_fn(&[n, 3, s, s], |_| rng.gen());
    let depth = Tensor::from_fn(&[n, 1, s, s], |_| rng.gen());
    let gt = Tensor::from_fn(&[n, 1, s, s], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let mut problem = Problem {
        model,
        rgb,
        depth,
        gt,
        loss: LossConfig::new(cfg.mode, true),
        switch_target: None,
    };

    let (loss, grads) = {
        let mut g = Graph::new();
        let bound = problem.model.bind(&mut g);
        let pred = problem.model.forward(&mut g, &bound, &problem.rgb, &problem.depth)?;
        if let (Some(s_rgb), Some(_)) = (pred.rgb, pred.switch) {
            problem.switch_target = Some(pseudo_switch_target(g.value(s_rgb), &problem.gt).map_err(loss_to_model)?);
        }
        let l = total_loss_with_target(&mut g, &pred, &problem.gt, problem.loss, problem.switch_target.as_ref())
            .map_err(loss_to_model)?;
        let mut grads = g.backward(l.total)?;
        let named: Vec<(String, Tensor)> = bound
            .named()
            .into_iter()
            .map(|(name, v)| (name, grads.take(*v).expect("parameter leaf")))
            .collect();
        (g.value(l.total).item(), named)
    };
    let (_, base_sig) = problem.eval().map_err(loss_to_model)?;

    let mut groups = Vec::with_capacity(grads.len());
    for (gi, (name, mut analytic)) in grads.into_iter().enumerate() {
        if cfg.corrupt.as_deref() == Some(name.as_str()) {
            analytic = analytic.map(|v| 1.5 * v + 1e-3);
        }
        let len = analytic.len();
        // Visit coordinates in a random order; coordinates set aside are
        // replaced by the next candidate.
        let order = sample(&mut rng, len, len).into_vec();
        let want = cfg.coords_per_group.min(len);
        let (mut checked, mut skipped) = (0, 0);
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        let mut passed = true;
        for &j in &order {
            if checked == want {
                break;
            }
            let at = |p: &mut Problem, delta: f64| -> Result<(f64, u64), ModelError> {
                let mut named = p.model.params.named_mut();
                let orig = named[gi].1.data()[j];
                named[gi].1.data_mut()[j] = orig + delta;
                drop(named);
                let r = p.eval().map_err(loss_to_model);
                p.model.params.named_mut()[gi].1.data_mut()[j] = orig;
                r
            };
            // A bias shift moves every unit of a channel, so some unit often
            // crosses a kink within the step. The secant is then usually still
            // close to the slope, so agreement counts. On disagreement across
            // a kink the step is refined until no unit crosses; a coordinate
            // that never gets clear of kinks is set aside.
            let a = analytic.data()[j];
            let mut verdict = None;
            for refine in 0..=REFINEMENTS {
                let h = cfg.step / 10f64.powi(refine);
                let (lp, sp) = at(&mut problem, h)?;
                let (lm, sm) = at(&mut problem, -h)?;
                let numeric = (lp - lm) / (2.0 * h);
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
                // Rounding error of the difference quotient grows as 1/h.
                let ok = rel < cfg.rel_tol || abs < cfg.abs_tol * (cfg.step / h);
                if ok || (sp == base_sig && sm == base_sig) {
                    verdict = Some((ok, rel, abs));
                    break;
                }
            }
            let Some((ok, rel, abs)) = verdict else {
                skipped += 1;
                continue;
            };
            checked += 1;
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            passed &= ok;
        }
        // A group whose every candidate sat on a boundary proves nothing.
        passed &= checked > 0;
        groups.push(GroupReport {
            name,
            checked,
            skipped,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed,
        });
    }
    Ok(GradcheckReport { groups, loss })
}

fn loss_to_model(e: LossError) -> ModelError {
    match e {
        LossError::Tensor(t) => ModelError::Tensor(t),
        other => ModelError::Input(other.to_string()),
    }
}
