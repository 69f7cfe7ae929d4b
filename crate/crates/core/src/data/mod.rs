//! RGB-D samples: NetPBM ingestion, resizing, flip augmentation, manifests
//! and a synthetic scene generator.

mod manifest;
pub mod pnm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::kernels::bilinear_forward;
use crate::model::SIZE_MULTIPLE;
use crate::par::Exec;
use crate::tensor::Tensor;

pub use manifest::{id_from_path, Manifest, Record};
pub use pnm::{PnmError, PnmImage};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Pnm {
        path: PathBuf,
        #[source]
        source: PnmError,
    },
    #[error("{path}: expected {expected}")]
    Kind { path: PathBuf, expected: &'static str },
    #[error("{path}: dimensions {got:?} do not match {expected:?} of the rgb image")]
    Dimensions {
        path: PathBuf,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: duplicate sample id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("size {0} is not a positive multiple of {SIZE_MULTIPLE}")]
    Size(usize),
    #[error("invalid generator settings: {0}")]
    Generator(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One aligned RGB-D item. `rgb` is `[3,H,W]`, `depth` and `gt` are `[1,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: Tensor,
    pub depth: Tensor,
    pub gt: Tensor,
}

impl Sample {
    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        let s = self.gt.shape();
        (s[1], s[2])
    }
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    pnm::decode(&bytes).map_err(|source| DataError::Pnm {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_pnm(path: &Path, img: &PnmImage) -> Result<()> {
    fs::write(path, img.encode()).map_err(|e| DataError::io(path, e))
}

/// Quantizes values in `[0, 1]` to an 8-bit grayscale image, `round(255·v)`.
pub fn to_gray8(width: usize, height: usize, values: &[f64]) -> PnmImage {
    let data = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect();
    PnmImage::gray(width, height, 255, data)
}

fn check_8bit(path: &Path, img: &PnmImage) -> Result<()> {
    if img.maxval > 255 {
        return Err(DataError::Pnm {
            path: path.to_path_buf(),
            source: PnmError::Maxval(img.maxval as u32),
        });
    }
    Ok(())
}

fn check_kind(path: &Path, img: &PnmImage, channels: usize) -> Result<()> {
    if img.channels != channels {
        let expected = if channels == 3 { "a P6 color image" } else { "a P5 grayscale image" };
        return Err(DataError::Kind {
            path: path.to_path_buf(),
            expected,
        });
    }
    Ok(())
}

/// Min-max normalization; a constant map becomes all zeros.
fn normalize_depth(raw: &[u16]) -> Vec<f64> {
    let lo = raw.iter().copied().min().unwrap_or(0);
    let hi = raw.iter().copied().max().unwrap_or(0);
    if lo == hi {
        return vec![0.0; raw.len()];
    }
    let span = (hi - lo) as f64;
    raw.iter().map(|&v| (v - lo) as f64 / span).collect()
}

/// Reads one triple. Colors are scaled to `[0,1]`, depth is min-max
/// normalized per image and the mask is thresholded at 128/255.
pub fn load_sample(record: &Record) -> Result<Sample> {
    let rgb = read_pnm(&record.rgb)?;
    check_kind(&record.rgb, &rgb, 3)?;
    check_8bit(&record.rgb, &rgb)?;
    let (w, h) = (rgb.width, rgb.height);

    let depth = read_pnm(&record.depth)?;
    check_kind(&record.depth, &depth, 1)?;
    let gt = read_pnm(&record.gt)?;
    check_kind(&record.gt, &gt, 1)?;
    check_8bit(&record.gt, &gt)?;
    for (path, img) in [(&record.depth, &depth), (&record.gt, &gt)] {
        if (img.width, img.height) != (w, h) {
            return Err(DataError::Dimensions {
                path: path.clone(),
                expected: (w, h),
                got: (img.width, img.height),
            });
        }
    }

    // Interleaved RGB to planar.
    let scale = 1.0 / rgb.maxval as f64;
    let mut planar = vec![0.0; 3 * h * w];
    for (i, px) in rgb.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c] as f64 * scale;
        }
    }
    let gmax = gt.maxval as f64;
    let mask = gt
        .data
        .iter()
        .map(|&v| if v as f64 / gmax >= 128.0 / 255.0 { 1.0 } else { 0.0 })
        .collect();

    let tensor = |c, data| Tensor::new(&[c, h, w], data).expect("dimensions checked above");
    Ok(Sample {
        id: record.id.clone(),
        rgb: tensor(3, planar),
        depth: tensor(1, normalize_depth(&depth.data)),
        gt: tensor(1, mask),
    })
}

fn nearest_index(dst: usize, input: usize, output: usize) -> usize {
    (((dst as f64 + 0.5) * input as f64 / output as f64) as usize).min(input - 1)
}

/// Resizes to `size×size`: bilinear for rgb and depth, nearest neighbour for
/// the mask so it stays binary.
pub fn preprocess(sample: &Sample, size: usize) -> Result<Sample> {
    if size == 0 || !size.is_multiple_of(SIZE_MULTIPLE) {
        return Err(DataError::Size(size));
    }
    let (h, w) = sample.size();
    if (h, w) == (size, size) {
        return Ok(sample.clone());
    }
    let resize = |t: &Tensor| {
        let c = t.shape()[0];
        let data = bilinear_forward(Exec::default(), c, (h, w), (size, size), t.data());
        Tensor::new(&[c, size, size], data).unwrap()
    };
    let rows: Vec<usize> = (0..size).map(|y| nearest_index(y, h, size)).collect();
    let cols: Vec<usize> = (0..size).map(|x| nearest_index(x, w, size)).collect();
    let g = sample.gt.data();
    let gt = Tensor::from_fn(&[1, size, size], |i| g[rows[i / size] * w + cols[i % size]]);
    Ok(Sample {
        id: sample.id.clone(),
        rgb: resize(&sample.rgb),
        depth: resize(&sample.depth),
        gt,
    })
}

fn mirror(t: &Tensor) -> Tensor {
    let w = t.shape()[t.rank() - 1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Mirrors all three maps about the vertical axis.
pub fn hflip(sample: &Sample) -> Sample {
    Sample {
        id: sample.id.clone(),
        rgb: mirror(&sample.rgb),
        depth: mirror(&sample.depth),
        gt: mirror(&sample.gt),
    }
}

/// Loads every record of a manifest and resizes it to `size`.
pub fn load_set(manifest: &Manifest, size: usize) -> Result<Vec<Sample>> {
    manifest
        .records()
        .iter()
        .map(|r| preprocess(&load_sample(r)?, size))
        .collect()
}
