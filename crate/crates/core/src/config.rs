//! Pipeline configuration (TOML) and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::{Mode, DEFAULT_MAX_INSPECT};
use crate::localize::MorphParams;
use crate::recognize::{KLatent, MatchConfig, SvdFit};
use crate::segment::Linkage;
use crate::text::PromptTemplate;

/// Environment variable naming the default model directory.
pub const MODEL_DIR_ENV: &str = "SEGVOC_MODEL_DIR";
pub const DEFAULT_TAPS: [&str; 2] = ["stem_swish", "block16_swish"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    /// Directory holding the files below when they are given as bare names.
    pub dir: Option<PathBuf>,
    pub backbone: PathBuf,
    pub image_encoder: PathBuf,
    pub text_encoder: PathBuf,
    pub bpe: PathBuf,
    pub taps: Vec<String>,
}

impl Default for ModelPaths {
    fn default() -> Self {
        Self {
            dir: None,
            backbone: "backbone.onnx".into(),
            image_encoder: "clip_image.onnx".into(),
            text_encoder: "clip_text.onnx".into(),
            bpe: "bpe_merges.txt".into(),
            taps: DEFAULT_TAPS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ModelPaths {
    fn base(&self) -> Option<PathBuf> {
        self.dir
            .clone()
            .or_else(|| std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match self.base() {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.resolve(&self.backbone)
    }

    pub fn image_encoder_path(&self) -> PathBuf {
        self.resolve(&self.image_encoder)
    }

    pub fn text_encoder_path(&self) -> PathBuf {
        self.resolve(&self.text_encoder)
    }

    pub fn bpe_path(&self) -> PathBuf {
        self.resolve(&self.bpe)
    }

    /// Fail early if a needed file is missing.
    pub fn validate(&self, recognition: bool) -> Result<()> {
        let mut needed = vec![self.backbone_path()];
        if recognition {
            needed.extend([self.image_encoder_path(), self.text_encoder_path(), self.bpe_path()]);
        }
        for p in needed {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "model file {} does not exist (set models.dir or {MODEL_DIR_ENV})",
                    p.display()
                )));
            }
        }
        if self.taps.is_empty() {
            return Err(Error::Config("at least one backbone tap is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub template: PromptTemplate,
    pub use_svd: bool,
    pub svd_fit: SvdFit,
    pub theta: f64,
    pub k_latent: KLatent,
    /// Overrides the text encoder's logit scale when set.
    pub logit_scale: Option<f64>,
    pub linkage: Linkage,
    pub max_inspect: usize,
    /// Fixed cluster count instead of the spectrum rule.
    pub clusters: Option<usize>,
    pub morph: MorphParams,
    pub models: ModelPaths,
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; 0 picks the number of CPUs.
    pub workers: usize,
    pub verbose: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let m = MatchConfig::default();
        Self {
            mode: Mode::Enlarged,
            template: m.template,
            use_svd: m.use_svd,
            svd_fit: m.svd_fit,
            theta: m.theta,
            k_latent: m.k_latent,
            logit_scale: None,
            linkage: Linkage::Ward,
            max_inspect: DEFAULT_MAX_INSPECT,
            clusters: None,
            morph: MorphParams::default(),
            models: ModelPaths::default(),
            cache_dir: None,
            workers: 0,
            verbose: false,
        }
    }
}

#[derive(Serialize)]
struct HashedFields<'a> {
    mode: Mode,
    template: PromptTemplate,
    use_svd: bool,
    svd_fit: SvdFit,
    theta: f64,
    k_latent: KLatent,
    logit_scale: Option<f64>,
    linkage: Linkage,
    max_inspect: usize,
    clusters: Option<usize>,
    morph: &'a MorphParams,
    taps: &'a [String],
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.match_config(1.0).validate()?;
        self.morph.validate()?;
        if self.max_inspect < 3 {
            return Err(Error::Config(format!("max_inspect {} is below 3", self.max_inspect)));
        }
        if self.clusters == Some(0) {
            return Err(Error::Config("clusters must be positive".into()));
        }
        if let KLatent::Fixed(0) = self.k_latent {
            return Err(Error::Config("k_latent must be positive".into()));
        }
        Ok(())
    }

    /// Matching settings; `sidecar_scale` is used unless overridden.
    pub fn match_config(&self, sidecar_scale: f64) -> MatchConfig {
        MatchConfig {
            use_svd: self.use_svd,
            k_latent: self.k_latent,
            theta: self.theta,
            logit_scale: self.logit_scale.unwrap_or(sidecar_scale),
            template: self.template,
            svd_fit: self.svd_fit,
        }
    }

    /// Hash of every setting that affects outputs, plus the model graph ids.
    /// Worker count, verbosity and file locations are excluded.
    pub fn hash(&self, graph_ids: &[&str]) -> String {
        let fields = HashedFields {
            mode: self.mode,
            template: self.template,
            use_svd: self.use_svd,
            svd_fit: self.svd_fit,
            theta: self.theta,
            k_latent: self.k_latent,
            logit_scale: self.logit_scale,
            linkage: self.linkage,
            max_inspect: self.max_inspect,
            clusters: self.clusters,
            morph: &self.morph,
            taps: &self.models.taps,
        };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&fields).expect("fields serialize"));
        for id in graph_ids {
            h.update(id.as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.mode, Mode::Enlarged);
        assert_eq!(c.template, PromptTemplate::Phrase3);
        assert!(!c.use_svd);
        assert_eq!(c.svd_fit, SvdFit::Joint);
        assert_eq!(c.theta, 0.3);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        let p = PipelineConfig::from_toml_str("mode = \"ovsri\"\ntheta = 0.5\n[morph]\nmin_area_px = 10\n").unwrap();
        assert_eq!(p.mode, Mode::Native);
        assert_eq!(p.theta, 0.5);
        assert_eq!(p.morph.min_area_px, 10);
        assert_eq!(p.morph.opening_se, 1);
        assert!(PipelineConfig::from_toml_str("theta = 2.0").is_err());
        assert!(PipelineConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn hash_ignores_workers_and_paths() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.workers = 8;
        b.verbose = true;
        b.models.dir = Some("/elsewhere".into());
        assert_eq!(a.hash(&["x"]), b.hash(&["x"]));
        assert_ne!(a.hash(&["x"]), a.hash(&["y"]));
        b.theta = 0.4;
        assert_ne!(a.hash(&["x"]), b.hash(&["x"]));
    }

    #[test]
    fn missing_model_is_reported() {
        let mut c = PipelineConfig::default();
        c.models.dir = Some("/nonexistent".into());
        let err = c.models.validate(false).unwrap_err().to_string();
        assert!(err.contains("backbone.onnx"), "{err}");
    }
}
