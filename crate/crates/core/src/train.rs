//! Minibatch training with Adam, periodic validation and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{hflip, Sample};
use crate::graph::Graph;
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossError};
use crate::metrics::{self, MetricsError};
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{FusionMode, Model, ModelConfig, ModelError, Prediction, Preset};
use crate::optim::{AdamConfig, AdamState, OptimError};
use crate::par::Exec;
use crate::tensor::Tensor;

/// Header of the per-step loss log.
pub const LOG_HEADER: &str = "step,l_sal_rgb,l_sal_d,l_sal_fused,l_sw,l_edge,total";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("step {step}: {source}")]
    Optim {
        step: u64,
        #[source]
        source: OptimError,
    },
    #[error("training set is empty")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub preset: Preset,
    pub mode: FusionMode,
    pub edge_loss: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Validate every this many steps (and after the last step).
    pub val_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::Mini,
            mode: FusionMode::Switch,
            edge_loss: true,
            lr: 1e-4,
            batch_size: 8,
            steps: 1000,
            val_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig::new(self.mode, self.edge_loss)
    }
}

/// Stacks `[C,H,W]` maps of the given samples into one `[N,C,H,W]` batch.
pub fn stack(samples: &[&Sample], pick: impl Fn(&Sample) -> &Tensor) -> Tensor {
    let first = pick(samples[0]).shape();
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first);
    let mut data = Vec::with_capacity(samples.len() * pick(samples[0]).len());
    for s in samples {
        data.extend_from_slice(pick(s).data());
    }
    Tensor::new(&shape, data).expect("samples share one shape")
}

/// Runs inference over `samples` in chunks of `batch` and splits the result per sample.
pub fn predict_samples(model: &Model, samples: &[Sample], batch: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let p = model.predict(&stack(&refs, |s| &s.rgb), &stack(&refs, |s| &s.depth))?;
        for i in 0..chunk.len() {
            out.push(Prediction {
                rgb: p.rgb.as_ref().map(|t| t.sample(i)),
                depth: p.depth.as_ref().map(|t| t.sample(i)),
                switch: p.switch.as_ref().map(|t| t.sample(i)),
                fused: p.fused.sample(i),
            });
        }
    }
    Ok(out)
}

/// Mean-F of the fused map over a labelled set.
pub fn mean_f(model: &Model, samples: &[Sample], batch: usize) -> Result<f64> {
    let preds = predict_samples(model, samples, batch)?;
    let fused: Vec<&[f64]> = preds.iter().map(|p| p.fused.data()).collect();
    let gts: Vec<&[f64]> = samples.iter().map(|s| s.gt.data()).collect();
    Ok(metrics::mean_f_measure(&fused, &gts)?)
}

/// Model, optimizer and sampling state of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    exec: Exec,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pool: Vec<Sample>,
}

impl Trainer {
    /// Prepares a run over `train`; flip augmentation doubles the pool.
    pub fn new(config: TrainConfig, train: &[Sample]) -> Result<Self> {
        if train.is_empty() {
            return Err(TrainError::EmptySet);
        }
        let model = Model::build(ModelConfig::preset(config.preset, config.mode), config.seed)?;
        let adam = AdamState::new(
            AdamConfig::with_lr(config.lr),
            model.params.named().into_iter().map(|(_, t)| t),
        );
        let mut pool = train.to_vec();
        pool.extend(train.iter().map(hflip));
        // Offset keeps the sampling stream independent of weight init.
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
        Ok(Self {
            config,
            model,
            adam,
            exec: Exec::default(),
            rng,
            order: Vec::new(),
            cursor: 0,
            pool,
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Next minibatch. Each epoch is a fresh permutation; a trailing partial
    /// batch is dropped unless the pool is smaller than one batch.
    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.config.batch_size.min(self.pool.len());
        if self.cursor + b > self.order.len() {
            self.order = (0..self.pool.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        batch
    }

    /// One forward/backward/update; returns the loss before the update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let step = self.adam.step + 1;
        let idx = self.next_batch();
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.pool[i]).collect();
        let rgb = stack(&batch, |s| &s.rgb);
        let depth = stack(&batch, |s| &s.depth);
        let gt = stack(&batch, |s| &s.gt);

        let mut g = Graph::with_exec(self.exec);
        let bound = self.model.bind(&mut g);
        let pred = self.model.forward(&mut g, &bound, &rgb, &depth)?;
        let loss = total_loss(&mut g, &pred, &gt, self.config.loss())?;
        if !loss.breakdown.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let mut grads = g.backward(loss.total).map_err(|e| TrainError::Model(e.into()))?;
        let grads: Vec<Tensor> = bound
            .named()
            .into_iter()
            .map(|(_, v)| grads.take(*v).expect("parameters are graph leaves"))
            .collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut named = self.model.params.named_mut();
        let mut params: Vec<(&str, &mut Tensor)> = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        self.adam
            .step(&mut params, &grad_refs)
            .map_err(|source| TrainError::Optim { step, source })?;
        Ok(loss.breakdown)
    }
}

pub fn log_row(step: u64, b: &LossBreakdown) -> String {
    format!(
        "{step},{},{},{},{},{},{}",
        b.l_sal_rgb, b.l_sal_d, b.l_sal_fused, b.l_sw, b.l_edge, b.total
    )
}

/// Files written by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub log: PathBuf,
    pub val_log: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub first_loss: Option<LossBreakdown>,
    pub last_loss: Option<LossBreakdown>,
    pub best_val: Option<(u64, f64)>,
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Trains for `config.steps` steps and writes into `out`:
/// `loss_log.csv`, `final.ckpt`, and with a validation set `val_log.csv` and
/// `best.ckpt` (highest validation mean-F, earliest on ties).
///
/// The loss log is flushed after every step, so a run that fails part way
/// leaves the rows up to the failure on disk.
pub fn run(config: TrainConfig, train: &[Sample], val: Option<&[Sample]>, out: &Path) -> Result<RunOutputs> {
    fs::create_dir_all(out).map_err(|source| TrainError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let log = out.join("loss_log.csv");
    let val_log = out.join("val_log.csv");
    let best_ckpt = out.join("best.ckpt");
    let final_ckpt = out.join("final.ckpt");
    let batch = config.batch_size;
    let steps = config.steps;
    let every = config.val_every.max(1);
    let val = val.filter(|v| !v.is_empty());

    let mut trainer = Trainer::new(config, train)?;
    let mut text = format!("{LOG_HEADER}\n");
    let mut val_text = String::from("step,mean_f\n");
    let mut first = None;
    let mut last = None;
    let mut best: Option<(u64, f64)> = None;
    write(&log, text.as_bytes())?;

    for step in 1..=steps {
        let b = match trainer.step() {
            Ok(b) => b,
            Err(e) => {
                write(&log, text.as_bytes())?;
                return Err(e);
            }
        };
        writeln!(text, "{}", log_row(step, &b)).unwrap();
        first.get_or_insert(b);
        last = Some(b);

        if let Some(v) = val {
            if step % every == 0 || step == steps {
                let f = mean_f(&trainer.model, v, batch)?;
                writeln!(val_text, "{step},{f}").unwrap();
                write(&val_log, val_text.as_bytes())?;
                if best.is_none_or(|(_, bf)| f > bf) {
                    best = Some((step, f));
                    checkpoint::save(&best_ckpt, &trainer.model, Some(&trainer.adam))?;
                }
            }
        }
        if step % every == 0 || step == steps {
            write(&log, text.as_bytes())?;
        }
    }
    write(&log, text.as_bytes())?;
    checkpoint::save(&final_ckpt, &trainer.model, Some(&trainer.adam))?;

    Ok(RunOutputs {
        log,
        val_log: val.map(|_| val_log),
        final_checkpoint: final_ckpt,
        best_checkpoint: best.map(|_| best_ckpt),
        first_loss: first,
        last_loss: last,
        best_val: best,
    })
}
