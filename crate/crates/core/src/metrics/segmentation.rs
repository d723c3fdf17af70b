use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mask::BinaryMask;
use crate::phantom::LabeledSlice;
use crate::study::Annotation;

/// Dice similarity coefficient, zero when either mask is empty or the masks
/// do not overlap.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let (na, nb) = (a.count(), b.count());
    if na == 0 || nb == 0 || inter == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    FP,
    TN,
    FN,
}

/// Reader mask against ground truth. A slice is diseased iff its truth mask
/// is non-empty; a diseased slice counts as detected only when the reader's
/// mask overlaps the truth.
pub fn classify(reader: &BinaryMask, truth: &BinaryMask) -> Result<Outcome> {
    let overlap = reader.intersection_count(truth)?;
    Ok(match (!truth.is_empty(), !reader.is_empty()) {
        (true, _) if overlap > 0 => Outcome::TP,
        (true, _) => Outcome::FN,
        (false, false) => Outcome::TN,
        (false, true) => Outcome::FP,
    })
}

pub fn classify_annotation(ann: &Annotation, truth: &LabeledSlice) -> Result<Outcome> {
    classify(&ann.mask, &truth.nodule_mask)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::TP => self.tp += 1,
            Outcome::FP => self.fp += 1,
            Outcome::TN => self.tn += 1,
            Outcome::FN => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl FromIterator<Outcome> for ConfusionCounts {
    fn from_iter<I: IntoIterator<Item = Outcome>>(iter: I) -> Self {
        let mut c = ConfusionCounts::default();
        iter.into_iter().for_each(|o| c.add(o));
        c
    }
}

/// `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticStats {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub npv: Option<f64>,
}

pub fn diagnostic_stats(c: &ConfusionCounts) -> DiagnosticStats {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    DiagnosticStats {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        npv: ratio(c.tn, c.tn + c.fn_),
    }
}
