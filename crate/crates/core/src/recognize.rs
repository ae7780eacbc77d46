//! Object recognition: crop embeddings, optional joint low-rank projection
//! with the text embeddings, scaled cosine scores, softmax, rejection.

use image::RgbImage;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::svd;
use crate::linalg::normalize_rows;
use crate::localize::{extract_objects, LocalizedObject, MorphParams};
use crate::runtime::{preprocess_image, EmbeddingInput, Session, EMBEDDING_DIM};
use crate::segment::SegmentationResult;
use crate::text::{PromptTemplate, TextEmbeddingMatrix, OPEN_SET_NAME};

pub const REJECTED: &str = "REJECTED";
const NORM_TOLERANCE: f64 = 1e-6;
/// Largest class count for which automatic `k` reduces the embedding.
pub const AUTO_K_LIMIT: usize = 256;

/// Image and text embeddings sharing one space. Text rows are aligned with
/// `category_names`; the open-set entry, when present, is last.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub image_rows: DMatrix<f64>,
    pub text_rows: DMatrix<f64>,
    pub category_names: Vec<String>,
    pub open_set: bool,
}

fn check_unit_rows(m: &DMatrix<f64>, what: &str) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        let n = row.norm();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("{what} row {i} has norm {n}")));
        }
    }
    Ok(())
}

impl EmbeddingBatch {
    pub fn new(image_rows: DMatrix<f64>, text: &TextEmbeddingMatrix) -> Result<Self> {
        let batch = Self {
            image_rows,
            text_rows: text.rows.clone(),
            category_names: text.names.clone(),
            open_set: text.open_set,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_rows.nrows() == 0 {
            return Err(Error::InvalidArgument("no category embeddings".into()));
        }
        if self.text_rows.nrows() != self.category_names.len() {
            return Err(Error::Shape(format!(
                "{} text rows for {} categories",
                self.text_rows.nrows(),
                self.category_names.len()
            )));
        }
        if self.image_rows.nrows() > 0 && self.image_rows.ncols() != self.text_rows.ncols() {
            return Err(Error::Shape(format!(
                "image embeddings have {} dims, text embeddings {}",
                self.image_rows.ncols(),
                self.text_rows.ncols()
            )));
        }
        check_unit_rows(&self.image_rows, "image")?;
        check_unit_rows(&self.text_rows, "text")
    }

    pub fn num_classes(&self) -> usize {
        self.text_rows.nrows()
    }

    pub fn open_set_index(&self) -> Option<usize> {
        self.open_set.then(|| self.num_classes() - 1)
    }
}

/// One L2-normalized image embedding per object crop, in input order.
pub fn embed_objects(session: &mut Session<'_>, objects: &[LocalizedObject]) -> Result<DMatrix<f64>> {
    let crops: Vec<&RgbImage> = objects.iter().map(|o| &o.crop).collect();
    embed_crops(session, &crops)
}

pub fn embed_crops(session: &mut Session<'_>, crops: &[&RgbImage]) -> Result<DMatrix<f64>> {
    let spec = session.handle().input_spec().clone();
    let mut rows = DMatrix::zeros(crops.len(), EMBEDDING_DIM);
    for (i, crop) in crops.iter().enumerate() {
        let tensor = preprocess_image(crop, &spec)?;
        let emb = session.run_embedding(EmbeddingInput::Image(&tensor))?;
        for (j, v) in emb.iter().enumerate() {
            rows[(i, j)] = *v as f64;
        }
    }
    normalize_rows(&mut rows);
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SvdFit {
    /// One decomposition of the stacked text and image rows.
    #[default]
    Joint,
    /// Each modality projected on its own basis.
    PerModality,
}

impl std::str::FromStr for SvdFit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joint" => Ok(SvdFit::Joint),
            "per-modality" | "per_modality" => Ok(SvdFit::PerModality),
            other => Err(Error::InvalidArgument(format!("unknown svd fit `{other}`"))),
        }
    }
}

impl std::fmt::Display for SvdFit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SvdFit::Joint => "joint",
            SvdFit::PerModality => "per-modality",
        })
    }
}

fn project_rows(rows: &DMatrix<f64>, basis: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    rows * basis.columns(0, k)
}

/// Project both modalities onto `k` leading right singular vectors and
/// renormalize every row. `k` is capped at the rank of the decomposed
/// matrix: every row already lies in that span, so nothing is lost.
pub fn joint_svd_project(batch: &EmbeddingBatch, k: usize, fit: SvdFit) -> Result<EmbeddingBatch> {
    batch.validate()?;
    let dim = batch.text_rows.ncols();
    if k == 0 || k > dim {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={dim}")));
    }
    let (mut text, mut image) = match fit {
        SvdFit::Joint => {
            let m = batch.image_rows.nrows();
            let c = batch.text_rows.nrows();
            let mut stacked = DMatrix::zeros(c + m, dim);
            stacked.rows_mut(0, c).copy_from(&batch.text_rows);
            if m > 0 {
                stacked.rows_mut(c, m).copy_from(&batch.image_rows);
            }
            let dec = svd(&stacked)?;
            let k = k.min(dec.rank());
            let projected = project_rows(&stacked, &dec.v, k);
            let image = if m > 0 {
                projected.rows(c, m).into_owned()
            } else {
                DMatrix::zeros(0, k)
            };
            (projected.rows(0, c).into_owned(), image)
        }
        SvdFit::PerModality => {
            let text_dec = svd(&batch.text_rows)?;
            let kt = k.min(text_dec.rank());
            let text = project_rows(&batch.text_rows, &text_dec.v, kt);
            let image = if batch.image_rows.nrows() > 0 {
                let image_dec = svd(&batch.image_rows)?;
                let ki = k.min(image_dec.rank());
                project_rows(&batch.image_rows, &image_dec.v, ki)
            } else {
                DMatrix::zeros(0, kt)
            };
            let width = text.ncols().max(image.ncols());
            (pad_columns(text, width), pad_columns(image, width))
        }
    };
    normalize_rows(&mut text);
    normalize_rows(&mut image);
    Ok(EmbeddingBatch {
        image_rows: image,
        text_rows: text,
        category_names: batch.category_names.clone(),
        open_set: batch.open_set,
    })
}

fn pad_columns(m: DMatrix<f64>, width: usize) -> DMatrix<f64> {
    let cols = m.ncols();
    if cols == width {
        m
    } else {
        m.insert_columns(cols, width - cols, 0.0)
    }
}

/// Max-shifted softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty score list".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("softmax of non-finite scores".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Latent width for the optional projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "KRepr", into = "KRepr")]
pub enum KLatent {
    #[default]
    Auto,
    Fixed(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KRepr {
    N(usize),
    S(String),
}

impl TryFrom<KRepr> for KLatent {
    type Error = String;

    fn try_from(r: KRepr) -> std::result::Result<Self, String> {
        match r {
            KRepr::N(n) => Ok(KLatent::Fixed(n)),
            KRepr::S(s) if s == "auto" => Ok(KLatent::Auto),
            KRepr::S(s) => Err(format!("expected `auto` or an integer, got `{s}`")),
        }
    }
}

impl From<KLatent> for KRepr {
    fn from(k: KLatent) -> Self {
        match k {
            KLatent::Auto => KRepr::S("auto".into()),
            KLatent::Fixed(n) => KRepr::N(n),
        }
    }
}

impl std::str::FromStr for KLatent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(KLatent::Auto);
        }
        s.parse()
            .map(KLatent::Fixed)
            .map_err(|_| Error::InvalidArgument(format!("expected `auto` or an integer, got `{s}`")))
    }
}

impl KLatent {
    /// `num_classes` when it is at most 256, otherwise the full embedding width.
    pub fn resolve(self, num_classes: usize, dim: usize) -> usize {
        match self {
            KLatent::Fixed(k) => k,
            KLatent::Auto if num_classes <= AUTO_K_LIMIT => num_classes,
            KLatent::Auto => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub use_svd: bool,
    pub k_latent: KLatent,
    pub theta: f64,
    pub logit_scale: f64,
    pub template: PromptTemplate,
    pub svd_fit: SvdFit,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            use_svd: false,
            k_latent: KLatent::Auto,
            theta: 0.3,
            logit_scale: 100.0,
            template: PromptTemplate::Phrase3,
            svd_fit: SvdFit::Joint,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidArgument(format!("theta {} outside [0, 1]", self.theta)));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "logit scale {} must be positive",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Category(String),
    OpenSet,
    Rejected,
}

impl Label {
    pub fn as_str(&self) -> &str {
        match self {
            Label::Category(n) => n,
            Label::OpenSet => OPEN_SET_NAME,
            Label::Rejected => REJECTED,
        }
    }

    pub fn category(&self) -> Option<&str> {
        match self {
            Label::Category(n) => Some(n),
            _ => None,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            OPEN_SET_NAME => Label::OpenSet,
            REJECTED => Label::Rejected,
            _ => Label::Category(s),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub object_ref: usize,
    pub probs: Vec<f64>,
    /// Index of the most probable class (first on ties).
    pub argmax: usize,
    pub label: Label,
    pub max_prob: f64,
}

/// Score every image row against every text row and label it.
pub fn match_batch(batch: &EmbeddingBatch, cfg: &MatchConfig) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    if batch.image_rows.nrows() > 0 && batch.image_rows.ncols() != batch.text_rows.ncols() {
        return Err(Error::Shape(format!(
            "image rows have {} dims, text rows {}",
            batch.image_rows.ncols(),
            batch.text_rows.ncols()
        )));
    }
    let text_norms: Vec<f64> = batch.text_rows.row_iter().map(|r| r.norm()).collect();
    let mut out = Vec::with_capacity(batch.image_rows.nrows());
    for (i, row) in batch.image_rows.row_iter().enumerate() {
        let norm = row.norm();
        let scores: Vec<f64> = batch
            .text_rows
            .row_iter()
            .zip(&text_norms)
            .map(|(t, &tn)| {
                let cos = if norm == 0.0 || tn == 0.0 {
                    0.0
                } else {
                    row.dot(&t) / (norm * tn)
                };
                cfg.logit_scale * cos
            })
            .collect();
        let probs = softmax(&scores)?;
        let (argmax, max_prob) = probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, p)| if p > best.1 { (j, p) } else { best });
        let label = if max_prob < cfg.theta {
            Label::Rejected
        } else if batch.open_set_index() == Some(argmax) {
            Label::OpenSet
        } else {
            Label::Category(batch.category_names[argmax].clone())
        };
        out.push(Prediction {
            object_ref: i,
            probs,
            argmax,
            label,
            max_prob,
        });
    }
    Ok(out)
}

/// Localized objects of one image with their predictions, index-aligned.
#[derive(Debug, Clone)]
pub struct Recognition {
    pub objects: Vec<LocalizedObject>,
    pub predictions: Vec<Prediction>,
}

/// Localize, embed, optionally project, and match.
pub fn recognize_image(
    image: &RgbImage,
    seg: &SegmentationResult,
    text: &TextEmbeddingMatrix,
    cfg: &MatchConfig,
    morph: &MorphParams,
    image_encoder: &mut Session<'_>,
) -> Result<Recognition> {
    let objects = extract_objects(image, seg, morph)?;
    let rows = embed_objects(image_encoder, &objects)?;
    let predictions = recognize_embeddings(rows, text, cfg)?;
    Ok(Recognition { objects, predictions })
}

/// Matching stage on precomputed object embeddings.
pub fn recognize_embeddings(
    image_rows: DMatrix<f64>,
    text: &TextEmbeddingMatrix,
    cfg: &MatchConfig,
) -> Result<Vec<Prediction>> {
    if image_rows.nrows() == 0 {
        return Ok(Vec::new());
    }
    let batch = EmbeddingBatch::new(image_rows, text)?;
    let batch = if cfg.use_svd {
        let k = cfg.k_latent.resolve(batch.num_classes(), batch.text_rows.ncols());
        joint_svd_project(&batch, k, cfg.svd_fit)?
    } else {
        batch
    };
    match_batch(&batch, cfg)
}
