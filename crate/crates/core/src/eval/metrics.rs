use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recognize::Label;

/// Object-level metrics for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub images: usize,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// AP as the product of precision and recall.
pub fn average_precision(precision: f64, recall: f64) -> f64 {
    precision * recall
}

/// Compare the predicted labels of one image against its ground-truth label
/// set. Rejected and open-set predictions are not positives; they still
/// count as (incorrect) objects for accuracy unless rejected.
pub fn image_metrics(predicted: &[Label], gt: &BTreeSet<String>) -> ImageMetrics {
    let positives: BTreeSet<&str> = predicted.iter().filter_map(Label::category).collect();
    let tp = positives.iter().filter(|l| gt.contains(**l)).count();
    let fp = positives.len() - tp;
    let fn_ = gt.len() - tp;
    let precision = if positives.is_empty() { 0.0 } else { tp as f64 / positives.len() as f64 };
    let recall = if gt.is_empty() { 0.0 } else { tp as f64 / gt.len() as f64 };

    let kept: Vec<&Label> = predicted.iter().filter(|l| **l != Label::Rejected).collect();
    let correct = kept
        .iter()
        .filter(|l| l.category().is_some_and(|c| gt.contains(c)))
        .count();
    let accuracy = if kept.is_empty() { 0.0 } else { correct as f64 / kept.len() as f64 };

    ImageMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        ap: average_precision(precision, recall),
        accuracy,
        tp,
        fp,
        fn_,
    }
}

/// Macro average over images: precision, recall and accuracy are per-image
/// means; F1 and AP are computed from the mean precision and recall.
pub fn aggregate(per_image: &[ImageMetrics]) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("no images to aggregate".into()));
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let precision = mean(|m| m.precision);
    let recall = mean(|m| m.recall);
    Ok(MetricsReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        ap: average_precision(precision, recall),
        accuracy: mean(|m| m.accuracy),
        tp: per_image.iter().map(|m| m.tp).sum(),
        fp: per_image.iter().map(|m| m.fp).sum(),
        fn_: per_image.iter().map(|m| m.fn_).sum(),
        images: per_image.len(),
    })
}

pub fn classification_metrics(images: &[(Vec<Label>, BTreeSet<String>)]) -> Result<MetricsReport> {
    let per: Vec<ImageMetrics> = images.iter().map(|(p, g)| image_metrics(p, g)).collect();
    aggregate(&per)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn cat(s: &str) -> Label {
        Label::Category(s.into())
    }

    #[test]
    fn perfect_image() {
        let m = image_metrics(&[cat("cow"), cat("person")], &set(&["cow", "person"]));
        assert_eq!((m.precision, m.recall, m.f1, m.ap, m.accuracy), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn missed_person() {
        let m = image_metrics(&[cat("cow")], &set(&["cow", "person"]));
        assert_eq!((m.precision, m.recall), (1.0, 0.5));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
    }

    #[test]
    fn rejected_and_open_set_are_not_positives() {
        let m = image_metrics(&[Label::Rejected, Label::OpenSet, cat("cow"), cat("dog")], &set(&["cow"]));
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        // Three non-rejected objects, one correct.
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        let none = image_metrics(&[Label::Rejected], &set(&["cow"]));
        assert_eq!((none.precision, none.recall, none.accuracy), (0.0, 0.0, 0.0));
    }

    #[test]
    fn duplicate_labels_count_once() {
        let m = image_metrics(&[cat("cow"), cat("cow"), cat("cow")], &set(&["cow"]));
        assert_eq!((m.tp, m.fp, m.precision), (1, 0, 1.0));
    }

    #[test]
    fn aggregation_is_macro() {
        let r = classification_metrics(&[
            (vec![cat("a")], set(&["a"])),
            (vec![cat("b")], set(&["a", "c"])),
        ])
        .unwrap();
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.ap, 0.25);
        assert_eq!(r.images, 2);
        assert!(classification_metrics(&[]).is_err());
    }

    #[test]
    fn ap_is_product() {
        assert!((average_precision(0.744, 0.545) * 100.0 - 40.548).abs() < 1e-9);
    }
}
