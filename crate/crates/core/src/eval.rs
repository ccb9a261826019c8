//! Segmentation metrics: Dice, trimap boundary accuracy, McNemar's test.
//!
//! Masks are `[H,W]` tensors holding exactly `0.0` or `1.0`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trimap widths reported everywhere.
pub const TRIMAP_WIDTHS: [usize; 5] = [1, 2, 3, 4, 5];

fn check_binary(mask: &Tensor, what: &str) -> Result<()> {
    mask.hw()?;
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("{what} is not binary (found {v})")));
    }
    Ok(())
}

fn check_pair(pred: &Tensor, truth: &Tensor) -> Result<()> {
    check_binary(pred, "prediction")?;
    check_binary(truth, "groundtruth")?;
    pred.expect_same_shape(truth)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Tensor, truth: &Tensor) -> Result<Self> {
        check_pair(pred, truth)?;
        let mut c = Self::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p == 1.0, t == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)`, and 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn dice(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, truth)?.dice())
}

/// Mass wherever `P(mass) > 0.5`; exact ties are background.
pub fn binarize(probs: &Tensor) -> Result<Tensor> {
    let (l, h, w) = probs.chw()?;
    if l != 2 {
        return Err(Error::Shape(format!("binarize expects 2 labels, got {l}")));
    }
    let mass = probs.channel(1);
    Tensor::new(&[h, w], mass.iter().map(|&p| if p > 0.5 { 1.0 } else { 0.0 }).collect())
}

/// Pixels with at least one 4-neighbour of the opposite label.
pub fn boundary(truth: &Tensor) -> Result<Vec<bool>> {
    check_binary(truth, "groundtruth")?;
    let (h, w) = truth.hw()?;
    let d = truth.data();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            let mut hit = false;
            if y > 0 {
                hit |= d[(y - 1) * w + x] != v;
            }
            if y + 1 < h {
                hit |= d[(y + 1) * w + x] != v;
            }
            if x > 0 {
                hit |= d[y * w + x - 1] != v;
            }
            if x + 1 < w {
                hit |= d[y * w + x + 1] != v;
            }
            out[y * w + x] = hit;
        }
    }
    Ok(out)
}

/// Band of pixels within Euclidean distance `width` of the groundtruth boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrimapBand {
    pub width: usize,
    pub members: Tensor,
}

impl TrimapBand {
    pub fn len(&self) -> usize {
        self.members.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn trimap(truth: &Tensor, width: usize) -> Result<TrimapBand> {
    if width == 0 {
        return Err(Error::Contract("trimap width must be at least 1".into()));
    }
    let (h, w) = truth.hw()?;
    let edge = boundary(truth)?;
    let r = width as isize;
    let mut members = vec![0.0; h * w];
    for (idx, _) in edge.iter().enumerate().filter(|(_, &b)| b) {
        let (by, bx) = ((idx / w) as isize, (idx % w) as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let (y, x) = (by + dy, bx + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    members[y as usize * w + x as usize] = 1.0;
                }
            }
        }
    }
    Ok(TrimapBand { width, members: Tensor::new(&[h, w], members)? })
}

/// `(correct, total)` over the band's pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandCounts {
    pub correct: u64,
    pub total: u64,
}

impl BandCounts {
    /// `None` for an empty band.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    pub fn merge(&mut self, other: &Self) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

pub fn band_counts(pred: &Tensor, truth: &Tensor, band: &Tensor) -> Result<BandCounts> {
    check_pair(pred, truth)?;
    check_binary(band, "band")?;
    band.expect_same_shape(truth)?;
    let mut c = BandCounts::default();
    for ((&p, &t), &b) in pred.data().iter().zip(truth.data()).zip(band.data()) {
        if b == 1.0 {
            c.total += 1;
            c.correct += (p == t) as u64;
        }
    }
    Ok(c)
}

/// Fraction of trimap pixels labelled correctly; `None` when the band is empty.
pub fn trimap_accuracy(pred: &Tensor, truth: &Tensor, width: usize) -> Result<Option<f64>> {
    let band = trimap(truth, width)?;
    Ok(band_counts(pred, truth, &band.members)?.accuracy())
}

/// Paired comparison of two classifiers on the same pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
    pub chi2: f64,
    pub p_value: f64,
}

/// Continuity-corrected McNemar test with one degree of freedom.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemar> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::Contract(format!(
            "correctness vectors differ in length: {} vs {}",
            correct_a.len(),
            correct_b.len()
        )));
    }
    let mut b = 0u64;
    let mut c = 0u64;
    for (&x, &y) in correct_a.iter().zip(correct_b) {
        match (x, y) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

pub fn mcnemar_from_counts(b: u64, c: u64) -> McNemar {
    if b + c == 0 {
        return McNemar { b, c, chi2: 0.0, p_value: 1.0 };
    }
    let diff = (b as f64 - c as f64).abs();
    let chi2 = (diff - 1.0).max(0.0).powi(2) / (b + c) as f64;
    let dist = ChiSquared::new(1.0).expect("one degree of freedom");
    let p_value = dist.sf(chi2).clamp(0.0, 1.0);
    McNemar { b, c, chi2, p_value }
}

pub fn mcnemar_pvalue(correct_a: &[bool], correct_b: &[bool]) -> Result<f64> {
    Ok(mcnemar(correct_a, correct_b)?.p_value)
}

/// Metrics of one predicted mask against its groundtruth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub confusion: ConfusionCounts,
    pub trimap: [BandCounts; 5],
}

impl SampleMetrics {
    pub fn compute(pred: &Tensor, truth: &Tensor) -> Result<Self> {
        let confusion = ConfusionCounts::from_masks(pred, truth)?;
        let mut trimap_counts = [BandCounts::default(); 5];
        for (slot, &w) in trimap_counts.iter_mut().zip(&TRIMAP_WIDTHS) {
            *slot = band_counts(pred, truth, &trimap(truth, w)?.members)?;
        }
        Ok(Self { confusion, trimap: trimap_counts })
    }
}

/// Pixel-pooled aggregate over a split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionCounts,
    pub trimap: [BandCounts; 5],
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn push(&mut self, s: SampleMetrics) {
        self.confusion.merge(&s.confusion);
        for (a, b) in self.trimap.iter_mut().zip(&s.trimap) {
            a.merge(b);
        }
        self.per_sample.push(s);
    }

    /// Dice from the pooled confusion counts.
    pub fn dice(&self) -> f64 {
        self.confusion.dice()
    }

    pub fn mean_sample_dice(&self) -> f64 {
        if self.per_sample.is_empty() {
            return f64::NAN;
        }
        self.per_sample.iter().map(|s| s.confusion.dice()).sum::<f64>() / self.per_sample.len() as f64
    }

    /// Pooled trimap accuracies at widths 1..=5 (`None` if every band was empty).
    pub fn trimap_accuracy(&self) -> [Option<f64>; 5] {
        self.trimap.map(|c| c.accuracy())
    }
}

/// Per-pixel correctness of `pred` against `truth`, for McNemar pooling.
pub fn correctness(pred: &Tensor, truth: &Tensor) -> Result<Vec<bool>> {
    check_pair(pred, truth)?;
    Ok(pred.data().iter().zip(truth.data()).map(|(a, b)| a == b).collect())
}
