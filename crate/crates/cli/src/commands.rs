use std::fs;
use std::path::Path;

use anyhow::anyhow;

use adafuse_core::data::synth::{category_of, gen_synthetic, Category, SynthConfig};
use adafuse_core::data::{load_set, preprocess, read_pnm, to_gray8, write_pnm, DataError, Manifest, Sample};
use adafuse_core::gradcheck::{self, GradcheckConfig};
use adafuse_core::metrics;
use adafuse_core::model::checkpoint::{self, CheckpointError};
use adafuse_core::model::{Model, ModelConfig, Preset, SIZE_MULTIPLE};
use adafuse_core::tensor::Tensor;
use adafuse_core::train::{self, predict_samples, TrainError};

use crate::error::{usage, CliError, Code, Result, CHECKPOINT, GRADCHECK, IO, MISSING_PREDICTION, NAN_LOSS};
use crate::settings;
use crate::{EvalArgs, GenDataArgs, GradcheckArgs, PredictArgs, TrainArgs};

fn data_err(e: DataError) -> CliError {
    match e {
        DataError::Size(_) | DataError::Generator(_) => CliError::new(crate::error::USAGE, e),
        other => CliError::new(IO, other),
    }
}

fn checkpoint_err(e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(_) => CliError::new(IO, e),
        other => CliError::new(CHECKPOINT, other),
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(SIZE_MULTIPLE) {
        return Err(usage(format!("size {size} is not a positive multiple of {SIZE_MULTIPLE}")));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| anyhow!("{}: {e}", dir.display()))
        .code(IO)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
        .code(IO)
}

fn load_manifest(path: &Path, size: usize) -> Result<Vec<Sample>> {
    let m = Manifest::load(path).map_err(data_err)?;
    load_set(&m, size).map_err(data_err)
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let parts: Vec<f64> = a
        .mix
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| usage(format!("--mix: {e}")))?;
    let mix: [f64; 4] = parts
        .try_into()
        .map_err(|_| usage("--mix needs exactly four comma-separated weights"))?;
    check_size(a.size)?;
    let cfg = SynthConfig {
        n: a.n,
        size: a.size,
        mix,
        seed: a.seed,
    };
    let out = gen_synthetic(&a.out, &cfg).map_err(data_err)?;
    println!("{}", out.manifest.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let run = settings::resolve(a)?;
    let train_set = load_manifest(&run.train_manifest, run.input_size)?;
    let val_set = match &run.val_manifest {
        Some(p) => Some(load_manifest(p, run.input_size)?),
        None => None,
    };
    let outputs = train::run(run.train.clone(), &train_set, val_set.as_deref(), &run.out).map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Optim { .. } => CliError::new(NAN_LOSS, e),
        TrainError::EmptySet => usage(e),
        TrainError::Checkpoint(c) => checkpoint_err(c),
        other => CliError::new(IO, other),
    })?;
    if let (Some(first), Some(last)) = (outputs.first_loss, outputs.last_loss) {
        println!(
            "steps {}: total loss {:.6} -> {:.6}",
            run.train.steps, first.total, last.total
        );
    }
    if let Some((step, f)) = outputs.best_val {
        println!("best validation mean-F {f:.4} at step {step}");
    }
    println!("log: {}", outputs.log.display());
    println!("checkpoint: {}", outputs.final_checkpoint.display());
    Ok(())
}

/// Loads a checkpoint, checking it against the expected architecture if one was given.
fn load_model(path: &Path, preset: Option<Preset>, mode: Option<adafuse_core::model::FusionMode>) -> Result<Model> {
    let bytes = fs::read(path)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
        .code(IO)?;
    let (model, _) = checkpoint::from_bytes(&bytes).map_err(checkpoint_err)?;
    if preset.is_none() && mode.is_none() {
        return Ok(model);
    }
    let mode = mode.unwrap_or(model.mode());
    let config = ModelConfig::preset(preset.unwrap_or(Preset::Mini), mode);
    let mut expected = Model::build(config, 0).code(CHECKPOINT)?;
    checkpoint::load_into(&mut expected, &bytes).map_err(checkpoint_err)?;
    if expected.config != model.config {
        return Err(CliError::new(
            CHECKPOINT,
            anyhow!("checkpoint architecture {:?} does not match the requested one", model.config),
        ));
    }
    Ok(expected)
}

pub fn predict(a: PredictArgs) -> Result<()> {
    check_size(a.input_size)?;
    let model = load_model(&a.checkpoint, a.preset, a.fusion_mode)?;
    let samples = load_manifest(&a.manifest, a.input_size)?;
    let preds = predict_samples(&model, &samples, a.batch_size).code(CHECKPOINT)?;
    create_dir(&a.out)?;
    let s = a.input_size;
    for (sample, p) in samples.iter().zip(&preds) {
        let maps = [
            ("fused", Some(&p.fused)),
            ("rgb", p.rgb.as_ref()),
            ("d", p.depth.as_ref()),
            ("sw", p.switch.as_ref()),
        ];
        for (suffix, map) in maps {
            if let Some(t) = map {
                let path = a.out.join(format!("{}.{suffix}.pgm", sample.id));
                write_pnm(&path, &to_gray8(s, s, t.data())).map_err(data_err)?;
            }
        }
    }
    println!("wrote maps for {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// Nearest-neighbour resampling of a `[1,H,W]` mask to `size×size`.
fn mask_at(gt: &Tensor, size: usize) -> Tensor {
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    if (h, w) == (size, size) {
        return gt.clone();
    }
    let pick = |d: usize, n: usize| (((d as f64 + 0.5) * n as f64 / size as f64) as usize).min(n - 1);
    Tensor::from_fn(&[1, size, size], |i| gt.data()[pick(i / size, h) * w + pick(i % size, w)])
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest).map_err(data_err)?;
    let category = match a.category {
        Some(k) => Some(Category::from_number(k).ok_or_else(|| usage(format!("unknown category {k}")))?),
        None => None,
    };
    let records: Vec<_> = manifest
        .records()
        .iter()
        .filter(|r| category.is_none_or(|c| category_of(&r.id) == Some(c)))
        .collect();
    if records.is_empty() {
        return Err(usage("no samples to evaluate"));
    }

    let (preds, gts): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if let Some(dir) = &a.pred_dir {
        let mut preds = Vec::with_capacity(records.len());
        let mut gts = Vec::with_capacity(records.len());
        for r in &records {
            let path = dir.join(format!("{}.fused.pgm", r.id));
            if !path.is_file() {
                return Err(CliError::new(
                    MISSING_PREDICTION,
                    anyhow!("missing prediction for `{}` ({})", r.id, path.display()),
                ));
            }
            let img = read_pnm(&path).map_err(data_err)?;
            if img.channels != 1 || img.width != img.height {
                return Err(CliError::new(IO, anyhow!("{}: expected a square P5 map", path.display())));
            }
            let sample = adafuse_core::data::load_sample(r).map_err(data_err)?;
            let max = img.maxval as f64;
            preds.push(img.data.iter().map(|&v| v as f64 / max).collect());
            gts.push(mask_at(&sample.gt, img.width).into_data());
        }
        (preds, gts)
    } else {
        check_size(a.input_size)?;
        let ckpt = a.checkpoint.as_ref().expect("clap enforces one source");
        let model = load_model(ckpt, None, None)?;
        let samples: Vec<Sample> = records
            .iter()
            .map(|r| adafuse_core::data::load_sample(r).and_then(|s| preprocess(&s, a.input_size)))
            .collect::<std::result::Result<_, _>>()
            .map_err(data_err)?;
        let preds = predict_samples(&model, &samples, a.batch_size).code(CHECKPOINT)?;
        (
            preds.into_iter().map(|p| p.fused.into_data()).collect(),
            samples.into_iter().map(|s| s.gt.into_data()).collect(),
        )
    };

    let report = metrics::evaluate(&preds, &gts).code(IO)?;
    for i in &report.empty_gt {
        eprintln!("warning: ground truth of `{}` has no salient pixel", records[*i].id);
    }
    create_dir(&a.out)?;
    write_text(&a.out.join("pr_curve.csv"), &report.pr.to_csv())?;
    let summary = report.summary_csv();
    write_text(&a.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    check_size(a.size)?;
    let cfg = GradcheckConfig {
        seed: a.seed,
        size: a.size,
        mode: a.fusion_mode,
        coords_per_group: a.coords.max(1),
        corrupt: a.inject_fault,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg).code(IO)?;
    println!("loss {:.6}, {} parameter groups", report.loss, report.groups.len());
    println!(
        "{:<32} {:>12} {:>12} {:>8} {:>8}  status",
        "group", "max_rel_err", "max_abs_err", "checked", "skipped"
    );
    for g in &report.groups {
        println!(
            "{:<32} {:>12.3e} {:>12.3e} {:>8} {:>8}  {}",
            g.name,
            g.max_rel_err,
            g.max_abs_err,
            g.checked,
            g.skipped,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("all {} groups within tolerance", report.groups.len());
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|g| g.name.as_str()).collect();
        Err(CliError::new(GRADCHECK, anyhow!("gradient check failed for: {}", failed.join(", "))))
    }
}
