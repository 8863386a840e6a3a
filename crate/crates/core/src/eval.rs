//! Dataset-level segmentation scoring from an aggregated confusion matrix.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::heatmap::ProbMap;
use crate::tensor_io::{LabelMask, IGNORE_LABEL};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dimension mismatch: prediction {pred_h}x{pred_w}, ground truth {gt_h}x{gt_w}")]
    DimMismatch {
        pred_h: usize,
        pred_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("label {value} out of range for {n_classes} classes")]
    ClassOutOfRange { value: u8, n_classes: usize },
    #[error("confusion matrix has no evaluated pixels")]
    EmptyMatrix,
    #[error("image {0:?} has no ground-truth mask")]
    MissingMask(String),
    #[error("confusion matrices have different class counts ({0} vs {1})")]
    ClassCountMismatch(usize, usize),
}

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
    n_images: usize,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
            n_images: 0,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.get(c, c)).sum()
    }

    /// Adds every pixel whose ground truth is not ignored.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<(), EvalError> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(EvalError::DimMismatch {
                pred_h: pred.height,
                pred_w: pred.width,
                gt_h: gt.height,
                gt_w: gt.width,
            });
        }
        let n = self.n_classes;
        let out_of_range = |value: u8| EvalError::ClassOutOfRange {
            value,
            n_classes: n,
        };
        // Validate first so a failed call leaves the matrix untouched.
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE_LABEL {
                continue;
            }
            if usize::from(g) >= n {
                return Err(out_of_range(g));
            }
            if usize::from(p) >= n {
                return Err(out_of_range(p));
            }
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g != IGNORE_LABEL {
                self.counts[usize::from(g) * n + usize::from(p)] += 1;
            }
        }
        self.n_images += 1;
        Ok(())
    }

    /// Commutative merge of two partial matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if other.n_classes != self.n_classes {
            return Err(EvalError::ClassCountMismatch(
                self.n_classes,
                other.n_classes,
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_images += other.n_images;
        Ok(())
    }

    /// Predicted pixels of class `c` whose ground truth is another class.
    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.n_classes)
            .filter(|&g| g != class)
            .map(|g| self.get(g, class))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Class id → IoU, `None` when the class never appears in either
    /// prediction or ground truth.
    pub per_class_iou: BTreeMap<usize, Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub n_images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<RunSummary>,
}

/// Spread of mIoU over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl RunSummary {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let std = if runs.len() > 1 {
            (runs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { runs, mean, std }
    }
}

/// IoU per class, mean IoU over classes with a non-empty union, and pixel
/// accuracy.
pub fn miou(cm: &ConfusionMatrix) -> Result<EvalReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let n = cm.n_classes;
    let mut per_class_iou = BTreeMap::new();
    let mut sum = 0.0;
    let mut exact = Some(Fraction::ZERO);
    let mut counted = 0usize;
    for c in 0..n {
        let tp = cm.get(c, c);
        let row: u64 = (0..n).map(|p| cm.get(c, p)).sum();
        let col: u64 = (0..n).map(|g| cm.get(g, c)).sum();
        let union = row + col - tp;
        let iou = (union > 0).then(|| tp as f64 / union as f64);
        if let Some(v) = iou {
            sum += v;
            exact = exact.and_then(|f| f.add(tp, union));
            counted += 1;
        }
        per_class_iou.insert(c, iou);
    }
    Ok(EvalReport {
        per_class_iou,
        miou: exact
            .and_then(|f| f.mean(counted as u128))
            .unwrap_or(sum / counted as f64),
        pixel_accuracy: cm.trace() as f64 / total as f64,
        n_images: cm.n_images,
        runs: None,
    })
}

/// Non-negative rational used to average IoUs without rounding while the
/// terms stay small.
#[derive(Debug, Clone, Copy)]
struct Fraction {
    num: u128,
    den: u128,
}

const EXACT_LIMIT: u128 = 1 << 53;

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Fraction {
    const ZERO: Fraction = Fraction { num: 0, den: 1 };

    fn add(self, num: u64, den: u64) -> Option<Fraction> {
        let (num, den) = (u128::from(num), u128::from(den));
        let n = self
            .num
            .checked_mul(den)?
            .checked_add(num.checked_mul(self.den)?)?;
        let d = self.den.checked_mul(den)?;
        let g = gcd(n, d).max(1);
        Some(Fraction {
            num: n / g,
            den: d / g,
        })
    }

    /// `self / count` rounded once to f64, if both terms are exact in f64.
    fn mean(self, count: u128) -> Option<f64> {
        let den = self.den.checked_mul(count)?;
        let g = gcd(self.num, den).max(1);
        let (num, den) = (self.num / g, den / g);
        (num <= EXACT_LIMIT && den <= EXACT_LIMIT).then(|| num as f64 / den as f64)
    }
}

/// Per-pixel argmax; ties go to the lowest class id.
pub fn argmax_prediction(prob: &ProbMap) -> LabelMask {
    let (h, w) = (prob.height(), prob.width());
    let mut data = vec![0u8; h * w];
    for (i, label) in data.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_value = prob.plane(0)[i];
        for c in 1..prob.n_classes() {
            let v = prob.plane(c)[i];
            if v > best_value {
                best = c;
                best_value = v;
            }
        }
        *label = best as u8;
    }
    LabelMask {
        height: h,
        width: w,
        data,
    }
}
