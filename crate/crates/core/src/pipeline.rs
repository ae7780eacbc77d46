//! End-to-end orchestration: segmentation, recognition and dataset
//! evaluation over a pool of workers that each own their sessions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::data::{CanonicalDataset, DatasetSample};
use crate::error::{Error, Result};
use crate::eval::report::ReportHeader;
use crate::eval::{hungarian_miou, image_metrics, EvalReport, ImageRecord, MaskSet, ObjectRecord};
use crate::latent::{compute_latent, LatentPixelFeatures};
use crate::localize::extract_objects;
use crate::recognize::{embed_objects, recognize_embeddings, MatchConfig, Prediction, Recognition};
use crate::runtime::{load_model, preprocess_image, ModelHandle, Session};
use crate::segment::{cluster, labels_to_masks, SegmentationResult};
use crate::text::embed::cache_file_name;
use crate::text::{embed_vocabulary, BpeTokenizer, PromptTemplate, TextEmbeddingMatrix, Vocabulary};

/// Logit scale assumed when no sidecar provides one.
pub const FALLBACK_LOGIT_SCALE: f64 = 100.0;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub latent: LatentPixelFeatures,
    pub seg: SegmentationResult,
}

struct RecognitionModels {
    image: ModelHandle,
    text: ModelHandle,
    tokenizer: BpeTokenizer,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    backbone: ModelHandle,
    recognition: Option<RecognitionModels>,
}

/// Sessions owned by one worker thread.
pub struct Workers<'p> {
    pub backbone: Session<'p>,
    pub image_encoder: Option<Session<'p>>,
}

/// One recognition setting evaluated on shared segmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub template: PromptTemplate,
    pub use_svd: bool,
}

impl Pipeline {
    /// Validate paths, then load the backbone and, with `recognition`, the
    /// two encoders and the tokenizer.
    pub fn load(cfg: PipelineConfig, recognition: bool) -> Result<Self> {
        cfg.validate()?;
        cfg.models.validate(recognition)?;
        let taps: Vec<&str> = cfg.models.taps.iter().map(String::as_str).collect();
        let backbone = load_model(cfg.models.backbone_path(), &taps)?;
        let recognition = if recognition {
            Some(RecognitionModels {
                image: load_model(cfg.models.image_encoder_path(), &[])?,
                text: load_model(cfg.models.text_encoder_path(), &[])?,
                tokenizer: BpeTokenizer::from_file(&cfg.models.bpe_path())?,
            })
        } else {
            None
        };
        Ok(Self {
            cfg,
            backbone,
            recognition,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &ModelHandle {
        &self.backbone
    }

    fn models(&self) -> Result<&RecognitionModels> {
        self.recognition
            .as_ref()
            .ok_or_else(|| Error::Config("recognition models were not loaded".into()))
    }

    pub fn image_encoder(&self) -> Result<&ModelHandle> {
        Ok(&self.models()?.image)
    }

    pub fn graph_ids(&self) -> Vec<&str> {
        let mut ids = vec![self.backbone.graph_id()];
        if let Some(r) = &self.recognition {
            ids.push(r.image.graph_id());
            ids.push(r.text.graph_id());
        }
        ids
    }

    pub fn config_hash_for(&self, cfg: &PipelineConfig) -> String {
        cfg.hash(&self.graph_ids())
    }

    pub fn config_hash(&self) -> String {
        self.config_hash_for(&self.cfg)
    }

    pub fn logit_scale(&self) -> f64 {
        self.recognition
            .as_ref()
            .and_then(|r| r.text.sidecar().logit_scale.or(r.image.sidecar().logit_scale))
            .unwrap_or(FALLBACK_LOGIT_SCALE)
    }

    pub fn match_config(&self) -> MatchConfig {
        self.cfg.match_config(self.logit_scale())
    }

    /// Features → latent projection → clusters → image-resolution masks.
    pub fn segment_image(&self, backbone: &mut Session<'_>, image: &RgbImage) -> Result<SegmentOutput> {
        let tensor = preprocess_image(image, self.backbone.input_spec())?;
        let stack = backbone.run_feature_taps(&tensor)?;
        let latent = compute_latent(&stack, self.cfg.mode, self.cfg.max_inspect, self.cfg.clusters)?;
        let n = latent.projections.nrows();
        let k = latent.spectrum.k.min(n);
        let labels = cluster(&latent, k, self.cfg.linkage)?;
        let seg = labels_to_masks(
            &labels,
            latent.grid_shape,
            (image.height() as usize, image.width() as usize),
            self.cfg.mode,
        )?;
        Ok(SegmentOutput { latent, seg })
    }

    /// L2-normalized prompt embeddings, read from or written to the cache.
    pub fn text_embeddings(&self, vocab: &Vocabulary, template: PromptTemplate) -> Result<TextEmbeddingMatrix> {
        let models = self.models()?;
        let mut session = models.text.session();
        embed_vocabulary(
            &mut session,
            &models.tokenizer,
            vocab,
            template,
            self.cfg.cache_dir.as_deref(),
        )
    }

    pub fn recognize(
        &self,
        image_session: &mut Session<'_>,
        image: &RgbImage,
        seg: &SegmentationResult,
        text: &TextEmbeddingMatrix,
        cfg: &MatchConfig,
    ) -> Result<Recognition> {
        crate::recognize::recognize_image(image, seg, text, cfg, &self.cfg.morph, image_session)
    }

    /// Apply `f` to every item on `workers` threads. Each thread opens its
    /// own sessions once; results keep the order of `items`.
    pub fn map_parallel<I, T, F>(&self, items: &[I], f: F) -> Result<Vec<T>>
    where
        I: Sync,
        T: Send,
        F: Fn(&mut Workers<'_>, &I) -> T + Sync + Send,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(pool.install(|| {
            items
                .par_iter()
                .map_init(
                    || Workers {
                        backbone: self.backbone.session(),
                        image_encoder: self.recognition.as_ref().map(|r| r.image.session()),
                    },
                    |w, item| f(w, item),
                )
                .collect()
        }))
    }

    /// Where `embed-text` style caching puts the matrix for this vocabulary.
    pub fn embedding_cache_path(&self, vocab: &Vocabulary, template: PromptTemplate) -> Result<Option<PathBuf>> {
        let models = self.models()?;
        Ok(self
            .cfg
            .cache_dir
            .as_ref()
            .map(|d| d.join(cache_file_name(vocab, template, models.text.graph_id()))))
    }

    /// Evaluate every variant on `ds`; segmentation and crop embeddings are
    /// shared across variants. Reports come back in variant order and do not
    /// depend on the worker count.
    pub fn evaluate(&self, ds: &CanonicalDataset, variants: &[Variant]) -> Result<Vec<EvalReport>> {
        self.models()?;
        let scale = self.logit_scale();
        let mut setups = Vec::with_capacity(variants.len());
        for v in variants {
            let mut cfg = self.cfg.clone();
            cfg.template = v.template;
            cfg.use_svd = v.use_svd;
            let text = self.text_embeddings(&ds.vocabulary, v.template)?;
            let hash = self.config_hash_for(&cfg);
            setups.push((cfg.match_config(scale), text, hash));
        }

        let per_image = self.map_parallel(&ds.samples, |w, sample| {
            let start = Instant::now();
            let records = match w
                .image_encoder
                .as_mut()
                .ok_or_else(|| Error::Config("recognition models were not loaded".into()))
                .and_then(|encoder| self.evaluate_sample(&mut w.backbone, encoder, sample, &setups))
            {
                Ok(r) => r,
                Err(e) => {
                    log::error!("{}: {e}", sample.image_id);
                    setups
                        .iter()
                        .map(|_| ImageRecord::failed(&sample.image_id, &e))
                        .collect()
                }
            };
            log::info!("{}: {:.2}s", sample.image_id, start.elapsed().as_secs_f64());
            records
        })?;

        let mut order: Vec<usize> = (0..ds.samples.len()).collect();
        order.sort_by(|&a, &b| compare_ids(&ds.samples[a].image_id, &ds.samples[b].image_id));
        Ok(setups
            .iter()
            .enumerate()
            .map(|(vi, (mcfg, _, hash))| {
                let images = order.iter().map(|&i| per_image[i][vi].clone()).collect();
                let header = ReportHeader {
                    dataset: ds.name.clone(),
                    mode: self.cfg.mode,
                    template: mcfg.template,
                    use_svd: mcfg.use_svd,
                    svd_fit: mcfg.svd_fit,
                    theta: mcfg.theta,
                    config_hash: hash.clone(),
                };
                EvalReport::new(header, images)
            })
            .collect())
    }

    fn evaluate_sample(
        &self,
        backbone: &mut Session<'_>,
        encoder: &mut Session<'_>,
        sample: &DatasetSample,
        setups: &[(MatchConfig, TextEmbeddingMatrix, String)],
    ) -> Result<Vec<ImageRecord>> {
        let image = load_rgb(&sample.image_path)?;
        if (image.height() as usize, image.width() as usize) != sample.image_size {
            return Err(Error::Dataset(format!(
                "image is {}x{}, annotations expect {}x{}",
                image.height(),
                image.width(),
                sample.image_size.0,
                sample.image_size.1
            )));
        }
        let gt = sample.ground_truth()?;
        let gt_labels = sample.gt_label_set()?;
        let out = self.segment_image(backbone, &image)?;
        let pred = MaskSet::new(out.seg.masks.clone());
        let hiou = hungarian_miou(&pred, &gt)?;
        let objects = extract_objects(&image, &out.seg, &self.cfg.morph)?;
        let rows = embed_objects(encoder, &objects)?;

        setups
            .iter()
            .map(|(mcfg, text, _)| {
                let preds = recognize_embeddings(rows.clone(), text, mcfg)?;
                let labels: Vec<_> = preds.iter().map(|p| p.label.clone()).collect();
                Ok(ImageRecord {
                    id: sample.image_id.clone(),
                    k: Some(out.seg.k),
                    hiou: Some(hiou),
                    objects: object_records(&objects, &preds, self.cfg.verbose),
                    metrics: Some(image_metrics(&labels, &gt_labels)),
                    error: None,
                })
            })
            .collect()
    }
}

/// Numeric ids compare by value and sort before non-numeric ones.
pub fn compare_ids(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

pub fn object_records(
    objects: &[crate::localize::LocalizedObject],
    preds: &[Prediction],
    with_probs: bool,
) -> Vec<ObjectRecord> {
    objects
        .iter()
        .zip(preds)
        .map(|(o, p)| ObjectRecord {
            bbox: [o.bbox.0, o.bbox.1, o.bbox.2, o.bbox.3],
            cluster_id: o.cluster_id,
            area: o.area,
            label: p.label.clone(),
            max_prob: p.max_prob,
            probs: with_probs.then(|| p.probs.clone()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_sort_numerically_first() {
        let mut ids = vec!["b", "10", "9", "a", "009"];
        ids.sort_by(|a, b| compare_ids(a, b));
        assert_eq!(ids, ["009", "9", "10", "a", "b"]);
    }
}
