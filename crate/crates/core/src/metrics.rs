//! IoU-family scores and the weighted BCE prediction loss.
//!
//! Intersection and union are counted over (time, band) positions. A block
//! pools the counts of its steps before dividing, so a block score is not
//! the mean of per-step scores. An empty prediction of an empty spectrum
//! scores 1.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::env_sim::BandVector;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_W_NEG: f64 = 0.1;
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IouConfig {
    pub block_n: usize,
    pub prob_threshold: f64,
}

impl Default for IouConfig {
    fn default() -> Self {
        Self {
            block_n: 5,
            prob_threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl IouConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_n == 0 {
            return Err(Error::Config("block_n must be >= 1".into()));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::Config("prob_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Intersection and union counts of one or more steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: usize,
    pub union: usize,
}

impl IouCounts {
    pub fn from_masks(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::LengthMismatch {
                expected: truth.len(),
                got: pred.len(),
            });
        }
        let mut c = IouCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            c.intersection += usize::from(p && t);
            c.union += usize::from(p || t);
        }
        Ok(c)
    }

    pub fn between(pred: &BandVector, truth: &BandVector, threshold: f64) -> Result<Self> {
        Self::from_masks(&pred.active_mask(threshold), &truth.active_mask(threshold))
    }

    pub fn score(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

impl Add for IouCounts {
    type Output = IouCounts;

    fn add(self, rhs: Self) -> Self {
        IouCounts {
            intersection: self.intersection + rhs.intersection,
            union: self.union + rhs.union,
        }
    }
}

impl AddAssign for IouCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for IouCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(IouCounts::default(), Add::add)
    }
}

/// Instantaneous IoU at the default 0.5 threshold.
pub fn iou_instant(pred: &BandVector, truth: &BandVector) -> Result<f64> {
    iou_instant_with(pred, truth, DEFAULT_THRESHOLD)
}

pub fn iou_instant_with(pred: &BandVector, truth: &BandVector, threshold: f64) -> Result<f64> {
    Ok(IouCounts::between(pred, truth, threshold)?.score())
}

/// Pooled IoU over the last `min(n, counts.len())` steps.
pub fn block_from_counts(counts: &[IouCounts], n: usize) -> Result<f64> {
    if counts.is_empty() || n == 0 {
        return Err(Error::EmptyWindow);
    }
    let from = counts.len().saturating_sub(n);
    Ok(counts[from..].iter().copied().sum::<IouCounts>().score())
}

/// Block IoU over the most recent `n` (prediction, truth) pairs of `window`.
pub fn iou_block(window: &[(BandVector, BandVector)], n: usize) -> Result<f64> {
    let counts = window
        .iter()
        .map(|(p, t)| IouCounts::between(p, t, DEFAULT_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    block_from_counts(&counts, n)
}

/// Cumulative IoU: the block over the whole window.
pub fn iou_cumulative(window: &[(BandVector, BandVector)]) -> Result<f64> {
    iou_block(window, window.len())
}

/// `BIoU_t^{N+1} - BIoU_t^N` from per-step counts, blocks ending at `t`.
pub fn diff_block_from_counts(counts: &[IouCounts], t: usize, n: usize) -> Result<f64> {
    if t < n {
        return Err(Error::WindowTooShort { t, n });
    }
    if t >= counts.len() {
        return Err(Error::LengthMismatch {
            expected: t + 1,
            got: counts.len(),
        });
    }
    let upto = &counts[..=t];
    Ok(block_from_counts(upto, n + 1)? - block_from_counts(upto, n)?)
}

pub fn iou_diff_block(history: &[(BandVector, BandVector)], t: usize, n: usize) -> Result<f64> {
    if t < n {
        return Err(Error::WindowTooShort { t, n });
    }
    if t >= history.len() {
        return Err(Error::LengthMismatch {
            expected: t + 1,
            got: history.len(),
        });
    }
    let counts = history[..=t]
        .iter()
        .map(|(p, tr)| IouCounts::between(p, tr, DEFAULT_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    diff_block_from_counts(&counts, t, n)
}

/// Weighted binary cross-entropy, mean over bands.
///
/// Binary mode: `-[y ln p + w_neg (1 - y) ln(1 - p)]`. With a class
/// distribution the positive term becomes the categorical cross-entropy of
/// the true class and empty bands pay `w_neg` times the "none" term.
pub fn wbce_loss(pred: &BandVector, truth: &BandVector, w_neg: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let n = pred.len();
    if n == 0 {
        return Ok(0.0);
    }
    let labels = truth.labels(DEFAULT_THRESHOLD);
    let clip = |p: f64| p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    let total: f64 = match pred {
        BandVector::ClassDistribution { n_classes, rows } => labels
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let p = clip(rows[b * (n_classes + 1) + c as usize]);
                if c == 0 {
                    -w_neg * p.ln()
                } else {
                    -p.ln()
                }
            })
            .sum(),
        _ => labels
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let p = clip(pred.objectness(b));
                if c > 0 {
                    -p.ln()
                } else {
                    -w_neg * (1.0 - p).ln()
                }
            })
            .sum(),
    };
    Ok(total / n as f64)
}
