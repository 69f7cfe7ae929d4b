//! Training settings: defaults, then an optional `key = value` file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adafuse_core::model::{FusionMode, Preset, SIZE_MULTIPLE};
use adafuse_core::train::TrainConfig;

use crate::error::{usage, Code, Result, IO};
use crate::TrainArgs;

const KEYS: &[&str] = &[
    "train_manifest",
    "val_manifest",
    "out",
    "seed",
    "input_size",
    "preset",
    "fusion_mode",
    "drop_edge_loss",
    "lr",
    "batch_size",
    "steps",
    "val_every",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub input_size: usize,
    pub train_manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub out: PathBuf,
}

/// Parses `key = value` lines; `#` starts a comment line. Keys may use `-` or `_`.
pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(usage(format!("config line {}: unknown key `{key}`", i + 1)));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

struct Layered {
    file: BTreeMap<String, String>,
    base: PathBuf,
}

impl Layered {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key `{key}`: {e}"))),
            None => Ok(None),
        }
    }

    /// Paths from the file are relative to the file's directory.
    fn path(&self, flag: Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.or_else(|| self.file.get(key).map(|v| self.base.join(v)))
    }
}

pub fn resolve(args: TrainArgs) -> Result<RunConfig> {
    let layered = match &args.config {
        Some(p) => Layered {
            file: parse_file(&fs::read_to_string(p).code(IO)?)?,
            base: p.parent().unwrap_or(Path::new(".")).to_path_buf(),
        },
        None => Layered {
            file: BTreeMap::new(),
            base: PathBuf::new(),
        },
    };
    let d = TrainConfig::default();
    let drop_edge = args.drop_edge_loss || layered.get::<bool>(None, "drop_edge_loss")?.unwrap_or(false);
    let train = TrainConfig {
        seed: layered.get(args.seed, "seed")?.unwrap_or(d.seed),
        preset: layered.get::<Preset>(args.preset, "preset")?.unwrap_or(d.preset),
        mode: layered.get::<FusionMode>(args.fusion_mode, "fusion_mode")?.unwrap_or(d.mode),
        edge_loss: !drop_edge,
        lr: layered.get(args.lr, "lr")?.unwrap_or(d.lr),
        batch_size: layered.get(args.batch_size, "batch_size")?.unwrap_or(d.batch_size),
        steps: layered.get(args.steps, "steps")?.unwrap_or(d.steps),
        val_every: layered.get(args.val_every, "val_every")?.unwrap_or(d.val_every),
    };
    let input_size = layered.get(args.input_size, "input_size")?.unwrap_or(64);
    let train_manifest = layered
        .path(args.train_manifest, "train_manifest")
        .ok_or_else(|| usage("--train-manifest is required"))?;
    let out = layered
        .path(args.out, "out")
        .ok_or_else(|| usage("--out is required"))?;
    let val_manifest = layered.path(args.val_manifest, "val_manifest");

    if train.batch_size == 0 {
        return Err(usage("batch size must be at least 1"));
    }
    if input_size == 0 || input_size % SIZE_MULTIPLE != 0 {
        return Err(usage(format!("input size {input_size} is not a positive multiple of {SIZE_MULTIPLE}")));
    }
    if !(train.lr > 0.0 && train.lr.is_finite()) {
        return Err(usage(format!("learning rate must be positive, got {}", train.lr)));
    }
    Ok(RunConfig {
        train,
        input_size,
        train_manifest,
        val_manifest,
        out,
    })
}
