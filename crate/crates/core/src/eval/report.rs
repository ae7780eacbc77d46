use serde::{Deserialize, Serialize};

use super::metrics::{aggregate, ImageMetrics};
use crate::latent::Mode;
use crate::recognize::{Label, SvdFit};
use crate::text::PromptTemplate;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    /// `[x0, y0, x1, y1]`, inclusive.
    pub bbox: [usize; 4],
    pub cluster_id: usize,
    pub area: usize,
    pub label: Label,
    pub max_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hiou: Option<f64>,
    #[serde(default)]
    pub objects: Vec<ObjectRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none", flatten)]
    pub metrics: Option<ImageMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ImageRecord {
    pub fn failed(id: impl Into<String>, error: impl std::fmt::Display) -> Self {
        Self {
            id: id.into(),
            k: None,
            hiou: None,
            objects: Vec::new(),
            metrics: None,
            error: Some(error.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanBlock {
    pub hiou: f64,
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
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub dataset: String,
    pub mode: Mode,
    pub template: PromptTemplate,
    pub use_svd: bool,
    pub svd_fit: SvdFit,
    pub theta: f64,
    pub config_hash: String,
    pub images: Vec<ImageRecord>,
    pub mean: MeanBlock,
}

/// Run settings echoed into the report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportHeader {
    pub dataset: String,
    pub mode: Mode,
    pub template: PromptTemplate,
    pub use_svd: bool,
    pub svd_fit: SvdFit,
    pub theta: f64,
    pub config_hash: String,
}

/// Means over the images that completed; failed images are only counted.
pub fn mean_block(images: &[ImageRecord]) -> MeanBlock {
    let ok: Vec<&ImageRecord> = images.iter().filter(|r| r.is_ok()).collect();
    let metrics: Vec<ImageMetrics> = ok.iter().filter_map(|r| r.metrics.clone()).collect();
    let hious: Vec<f64> = ok.iter().filter_map(|r| r.hiou).collect();
    let hiou = if hious.is_empty() { 0.0 } else { hious.iter().sum::<f64>() / hious.len() as f64 };
    let failed = images.len() - ok.len();
    match aggregate(&metrics) {
        Ok(m) => MeanBlock {
            hiou,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            ap: m.ap,
            accuracy: m.accuracy,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            images: ok.len(),
            failed,
        },
        Err(_) => MeanBlock {
            hiou,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            ap: 0.0,
            accuracy: 0.0,
            tp: 0,
            fp: 0,
            fn_: 0,
            images: ok.len(),
            failed,
        },
    }
}

impl EvalReport {
    pub fn new(header: ReportHeader, images: Vec<ImageRecord>) -> Self {
        let mean = mean_block(&images);
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            dataset: header.dataset,
            mode: header.mode,
            template: header.template,
            use_svd: header.use_svd,
            svd_fit: header.svd_fit,
            theta: header.theta,
            config_hash: header.config_hash,
            images,
            mean,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Header line plus one row with the mean block.
    pub fn mean_csv(&self) -> String {
        let m = &self.mean;
        format!(
            "dataset,mode,template,use_svd,hiou,precision,recall,f1,ap,accuracy,tp,fp,fn,images,failed\n\
             {},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.dataset,
            self.mode,
            self.template,
            self.use_svd,
            m.hiou,
            m.precision,
            m.recall,
            m.f1,
            m.ap,
            m.accuracy,
            m.tp,
            m.fp,
            m.fn_,
            m.images,
            m.failed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> ReportHeader {
        ReportHeader {
            dataset: "toy".into(),
            mode: Mode::Enlarged,
            template: PromptTemplate::Phrase3,
            use_svd: false,
            svd_fit: SvdFit::Joint,
            theta: 0.3,
            config_hash: "abc".into(),
        }
    }

    fn ok(id: &str, hiou: f64, p: f64) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            k: Some(3),
            hiou: Some(hiou),
            objects: vec![],
            metrics: Some(ImageMetrics {
                precision: p,
                recall: 1.0,
                f1: 0.0,
                ap: 0.0,
                accuracy: 1.0,
                tp: 1,
                fp: 0,
                fn_: 0,
            }),
            error: None,
        }
    }

    #[test]
    fn failed_images_are_counted_not_averaged() {
        let r = EvalReport::new(header(), vec![ok("a", 1.0, 1.0), ImageRecord::failed("b", "boom"), ok("c", 0.5, 0.5)]);
        assert_eq!(r.mean.images, 2);
        assert_eq!(r.mean.failed, 1);
        assert_eq!(r.mean.hiou, 0.75);
        assert_eq!(r.mean.precision, 0.75);
    }

    #[test]
    fn json_round_trip_and_schema() {
        let r = EvalReport::new(header(), vec![ok("a", 1.0, 1.0)]);
        let json = r.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["schema_version", "dataset", "mode", "config_hash", "images", "mean"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["images"][0].get("precision").is_some());
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.mean_csv().lines().count(), 2);
    }
}
