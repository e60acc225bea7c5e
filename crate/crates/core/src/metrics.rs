//! oIoU, mIoU and precision at IoU thresholds.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Intersection and union pixel counts of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn of(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape("iou", &[pred.len()], &[gt.len()]));
        }
        let (mut intersection, mut union) = (0, 0);
        for (&p, &g) in pred.iter().zip(gt) {
            intersection += (p && g) as u64;
            union += (p || g) as u64;
        }
        Ok(Self { intersection, union })
    }

    /// Both masks empty counts as perfect agreement.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.iou())
}

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.5, 0.7];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalAccumulator {
    pub total_intersection: u64,
    pub total_union: u64,
    pub per_sample_ious: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl Default for EvalAccumulator {
    fn default() -> Self {
        Self::new(&DEFAULT_THRESHOLDS)
    }
}

impl EvalAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        Self {
            total_intersection: 0,
            total_union: 0,
            per_sample_ious: Vec::new(),
            thresholds: thresholds.to_vec(),
        }
    }

    pub fn add(&mut self, pred: &[bool], gt: &[bool]) -> Result<f64> {
        let o = Overlap::of(pred, gt)?;
        self.push(o);
        Ok(o.iou())
    }

    pub fn push(&mut self, o: Overlap) {
        self.total_intersection += o.intersection;
        self.total_union += o.union;
        self.per_sample_ious.push(o.iou());
    }

    /// Folds in a partial accumulator computed elsewhere.
    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.total_intersection += other.total_intersection;
        self.total_union += other.total_union;
        self.per_sample_ious.extend_from_slice(&other.per_sample_ious);
    }

    pub fn len(&self) -> usize {
        self.per_sample_ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample_ious.is_empty()
    }

    /// Corpus-level intersection over corpus-level union.
    pub fn oiou(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyAccumulator);
        }
        Ok(if self.total_union == 0 {
            1.0
        } else {
            self.total_intersection as f64 / self.total_union as f64
        })
    }

    pub fn miou(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyAccumulator);
        }
        // sorted summation so the result does not depend on sample order
        let mut ious = self.per_sample_ious.clone();
        ious.sort_by(f64::total_cmp);
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    /// Fraction of samples with IoU strictly above `t`.
    pub fn precision_at(&self, t: f64) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyAccumulator);
        }
        let hits = self.per_sample_ious.iter().filter(|&&v| v > t).count();
        Ok(hits as f64 / self.len() as f64)
    }

    pub fn report(&self) -> Result<MetricReport> {
        Ok(MetricReport {
            oiou: self.oiou()?,
            miou: self.miou()?,
            precision: self
                .thresholds
                .iter()
                .map(|&t| self.precision_at(t).map(|p| (t, p)))
                .collect::<Result<_>>()?,
            samples: self.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub oiou: f64,
    pub miou: f64,
    pub precision: Vec<(f64, f64)>,
    pub samples: usize,
}

impl MetricReport {
    /// `(name, value)` rows in a fixed order.
    pub fn rows(&self) -> Vec<(alloc::string::String, f64)> {
        let mut rows = vec![("oIoU".into(), self.oiou), ("mIoU".into(), self.miou)];
        for &(t, p) in &self.precision {
            rows.push((alloc::format!("P@{t}"), p));
        }
        rows
    }
}
