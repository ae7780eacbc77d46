//! Hungarian-matched mIoU and object-level classification metrics.

pub mod hungarian;
pub mod metrics;
pub mod report;

pub use hungarian::{hungarian_match, Assignment};
pub use metrics::{average_precision, classification_metrics, f1_score, image_metrics, ImageMetrics, MetricsReport};
pub use report::{EvalReport, ImageRecord, MeanBlock, ObjectRecord};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Masks of one image, optionally labelled, with pixels to ignore.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    pub masks: Vec<BinaryMask>,
    pub labels: Option<Vec<String>>,
    pub ignore: Option<BinaryMask>,
}

impl MaskSet {
    pub fn new(masks: Vec<BinaryMask>) -> Self {
        Self {
            masks,
            labels: None,
            ignore: None,
        }
    }

    pub fn labelled(masks: Vec<BinaryMask>, labels: Vec<String>) -> Result<Self> {
        if masks.len() != labels.len() {
            return Err(Error::Shape(format!("{} masks with {} labels", masks.len(), labels.len())));
        }
        Ok(Self {
            masks,
            labels: Some(labels),
            ignore: None,
        })
    }

    pub fn with_ignore(mut self, ignore: Option<BinaryMask>) -> Self {
        self.ignore = ignore;
        self
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Unique labels in first-seen order.
    pub fn label_set(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in self.labels.iter().flatten() {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
        out
    }
}

/// `|a ∧ b| / |a ∨ b|` over pixels not in `ignore`; 0 when the union is empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask, ignore: Option<&BinaryMask>) -> Result<f64> {
    if a.shape() != b.shape() || ignore.is_some_and(|m| m.shape() != a.shape()) {
        return Err(Error::Shape(format!("masks {:?} and {:?}", a.shape(), b.shape())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, (&x, &y)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
        if ignore.is_some_and(|m| m.as_slice()[i]) {
            continue;
        }
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

pub fn iou_matrix(pred: &MaskSet, gt: &MaskSet) -> Result<Vec<Vec<f64>>> {
    let ignore = gt.ignore.as_ref().or(pred.ignore.as_ref());
    pred.masks
        .iter()
        .map(|p| gt.masks.iter().map(|g| iou(p, g, ignore)).collect())
        .collect()
}

/// Mean IoU over the optimal matching, divided by the number of matched
/// pairs. Empty inputs score 0.
pub fn hungarian_miou(pred: &MaskSet, gt: &MaskSet) -> Result<f64> {
    Ok(hungarian_miou_detailed(pred, gt)?.0)
}

pub fn hungarian_miou_detailed(pred: &MaskSet, gt: &MaskSet) -> Result<(f64, Assignment)> {
    if let (Some(p), Some(g)) = (pred.masks.first(), gt.masks.first()) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "prediction masks {:?} vs ground truth {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let w = iou_matrix(pred, gt)?;
    let a = hungarian_match(&w)?;
    let score = if a.pairs.is_empty() {
        0.0
    } else {
        a.total_iou / a.pairs.len() as f64
    };
    Ok((score, a))
}
