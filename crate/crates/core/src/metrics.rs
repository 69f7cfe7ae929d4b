//! Saliency evaluation: precision/recall curve over 255 thresholds, maximum
//! and adaptive-threshold ("mean") F-measure, and mean absolute error.
//!
//! Conventions: a pixel is salient iff `s >= t`; precision 0/0 is 0 and
//! recall 0/0 is 1; curves average P and R over images per threshold, the
//! mean F-measure averages per-image F values.

use std::fmt::Write as _;

use thiserror::Error;

use crate::par::Exec;

/// Weight of precision in the F-measure.
pub const BETA_SQ: f64 = 0.3;
/// Number of PR thresholds, `t_k = k / 255` for `k = 0..255`.
pub const NUM_THRESHOLDS: usize = 255;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no images to evaluate")]
    Empty,
    #[error("{preds} predictions but {gts} ground truths")]
    CountMismatch { preds: usize, gts: usize },
    #[error("image {index}: prediction has {pred} pixels, ground truth {gt}")]
    SizeMismatch { index: usize, pred: usize, gt: usize },
    #[error("image {index}: ground truth is not binary")]
    NonBinary { index: usize },
    #[error("image {index}: prediction has no pixels")]
    EmptyImage { index: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub fn thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|k| k as f64 / 255.0)
}

/// Salient-pixel mask at threshold `t`.
pub fn binarize(s: &[f64], t: f64) -> Vec<bool> {
    s.iter().map(|&v| v >= t).collect()
}

/// `(1 + β²)·P·R / (β²·P + R)`, 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    let den = BETA_SQ * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / den
    }
}

/// Precision and recall from confusion counts with the 0/0 conventions.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.thresholds
            .iter()
            .zip(&self.precision)
            .zip(&self.recall)
            .map(|((&t, &p), &r)| (t, p, r))
    }

    /// `threshold,precision,recall` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for (t, p, r) in self.pairs() {
            let _ = writeln!(s, "{t:?},{p:?},{r:?}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub pr: PrCurve,
    pub max_f: f64,
    pub mean_f: f64,
    pub mae: f64,
    pub beta_sq: f64,
    /// Indices of images whose ground truth has no salient pixel.
    pub empty_gt: Vec<usize>,
}

impl MetricsReport {
    /// `max_f,mean_f,mae` header and one value line.
    pub fn summary_csv(&self) -> String {
        format!("max_f,mean_f,mae\n{:?},{:?},{:?}\n", self.max_f, self.mean_f, self.mae)
    }
}

fn validate<P: AsRef<[f64]>, G: AsRef<[f64]>>(preds: &[P], gts: &[G]) -> Result<()> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != gts.len() {
        return Err(MetricsError::CountMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    for (index, (p, g)) in preds.iter().zip(gts).enumerate() {
        let (p, g) = (p.as_ref(), g.as_ref());
        if p.is_empty() {
            return Err(MetricsError::EmptyImage { index });
        }
        if p.len() != g.len() {
            return Err(MetricsError::SizeMismatch {
                index,
                pred: p.len(),
                gt: g.len(),
            });
        }
        if g.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(MetricsError::NonBinary { index });
        }
    }
    Ok(())
}

/// Per-threshold `(tp, fp)` counts of one image, plus its positive count.
fn image_counts(s: &[f64], y: &[f64], ts: &[f64; NUM_THRESHOLDS]) -> ([usize; NUM_THRESHOLDS], [usize; NUM_THRESHOLDS], usize) {
    // A pixel is predicted salient at every threshold t_k <= s, i.e. for
    // k < (number of thresholds not exceeding s). Histogram on that count.
    let mut pos_hist = [0usize; NUM_THRESHOLDS + 1];
    let mut neg_hist = [0usize; NUM_THRESHOLDS + 1];
    for (&v, &g) in s.iter().zip(y) {
        let c = ts.partition_point(|&t| t <= v);
        if g == 1.0 {
            pos_hist[c] += 1;
        } else {
            neg_hist[c] += 1;
        }
    }
    let mut tp = [0usize; NUM_THRESHOLDS];
    let mut fp = [0usize; NUM_THRESHOLDS];
    let (mut acc_p, mut acc_n) = (0, 0);
    for k in (0..NUM_THRESHOLDS).rev() {
        acc_p += pos_hist[k + 1];
        acc_n += neg_hist[k + 1];
        tp[k] = acc_p;
        fp[k] = acc_n;
    }
    let positives = pos_hist.iter().sum();
    (tp, fp, positives)
}

/// Dataset PR curve: per-image precision/recall at each threshold, averaged.
pub fn pr_curve<P: AsRef<[f64]> + Sync, G: AsRef<[f64]> + Sync>(preds: &[P], gts: &[G]) -> Result<PrCurve> {
    validate(preds, gts)?;
    let ts = thresholds();
    let per_image = Exec::default().map_range(preds.len(), |i| {
        let (tp, fp, positives) = image_counts(preds[i].as_ref(), gts[i].as_ref(), &ts);
        let mut pr = [(0.0, 0.0); NUM_THRESHOLDS];
        for k in 0..NUM_THRESHOLDS {
            pr[k] = precision_recall(tp[k], fp[k], positives - tp[k]);
        }
        pr
    });
    let n = preds.len() as f64;
    let mut precision = vec![0.0; NUM_THRESHOLDS];
    let mut recall = vec![0.0; NUM_THRESHOLDS];
    for pr in &per_image {
        for k in 0..NUM_THRESHOLDS {
            precision[k] += pr[k].0;
            recall[k] += pr[k].1;
        }
    }
    precision.iter_mut().for_each(|p| *p /= n);
    recall.iter_mut().for_each(|r| *r /= n);
    Ok(PrCurve {
        thresholds: ts.to_vec(),
        precision,
        recall,
    })
}

/// Highest F-measure over the curve's PR pairs.
pub fn max_f_measure(pr: &PrCurve) -> f64 {
    pr.precision
        .iter()
        .zip(&pr.recall)
        .map(|(&p, &r)| f_measure(p, r))
        .fold(0.0, f64::max)
}

/// `mean(s) + std(s)` with the population standard deviation.
///
/// A constant map returns its value exactly; summation rounding would
/// otherwise push the threshold a hair above every pixel.
pub fn adaptive_threshold(s: &[f64]) -> f64 {
    if let Some(&first) = s.first() {
        if s.iter().all(|&v| v == first) {
            return first;
        }
    }
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    mean + var.sqrt()
}

/// F-measure of one image binarized at its adaptive threshold.
pub fn adaptive_f_measure(s: &[f64], y: &[f64]) -> f64 {
    let t = adaptive_threshold(s);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&v, &g) in s.iter().zip(y) {
        match (v >= t, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let (p, r) = precision_recall(tp, fp, fn_);
    f_measure(p, r)
}

/// Average over images of the adaptive-threshold F-measure.
pub fn mean_f_measure<P: AsRef<[f64]> + Sync, G: AsRef<[f64]> + Sync>(preds: &[P], gts: &[G]) -> Result<f64> {
    validate(preds, gts)?;
    let per = Exec::default().map_range(preds.len(), |i| adaptive_f_measure(preds[i].as_ref(), gts[i].as_ref()));
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Average over images of the per-pixel mean absolute error.
pub fn mae<P: AsRef<[f64]> + Sync, G: AsRef<[f64]> + Sync>(preds: &[P], gts: &[G]) -> Result<f64> {
    validate(preds, gts)?;
    let per = Exec::default().map_range(preds.len(), |i| {
        let (s, y) = (preds[i].as_ref(), gts[i].as_ref());
        s.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.len() as f64
    });
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Full report over a dataset.
pub fn evaluate<P: AsRef<[f64]> + Sync, G: AsRef<[f64]> + Sync>(preds: &[P], gts: &[G]) -> Result<MetricsReport> {
    let pr = pr_curve(preds, gts)?;
    let max_f = max_f_measure(&pr);
    let empty_gt = gts
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.as_ref().contains(&1.0))
        .map(|(i, _)| i)
        .collect();
    Ok(MetricsReport {
        max_f,
        mean_f: mean_f_measure(preds, gts)?,
        mae: mae(preds, gts)?,
        pr,
        beta_sq: BETA_SQ,
        empty_gt,
    })
}
