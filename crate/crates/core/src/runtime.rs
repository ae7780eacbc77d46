//! Loading exported ONNX graphs and running them.
//!
//! Every graph ships with a JSON sidecar (`<model>.meta.json`) that carries the
//! preprocessing descriptor, the activation taps the graph exposes, and for the
//! vision-language encoders the learned logit scale and text context length.
//! A [`ModelHandle`] is immutable once loaded; inference goes through a
//! per-worker [`Session`] that owns its compiled plans.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tract_onnx::prelude::*;

use crate::error::{read_file, read_json, Error, Result};

/// Width of the vision-language embedding space.
pub const EMBEDDING_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Keep the decoded size; fixed `h`/`w` must then match the image.
    None,
    /// Stretch to `h`×`w`.
    Exact,
    /// Scale so the image covers `h`×`w`, then crop the centre.
    ShortestEdgeCenterCrop,
}

/// Preprocessing descriptor read from the sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    /// Fixed input height; `None` means the graph takes any height.
    #[serde(default)]
    pub h: Option<usize>,
    #[serde(default)]
    pub w: Option<usize>,
    pub channels: usize,
    /// Per-channel mean on the `[0, 1]` pixel scale.
    #[serde(default)]
    pub mean: Vec<f32>,
    #[serde(default)]
    pub std: Vec<f32>,
    pub resize_policy: ResizePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub input: InputSpec,
    #[serde(default)]
    pub taps: Vec<String>,
    #[serde(default)]
    pub logit_scale: Option<f64>,
    /// Present only for text encoders, whose input is a token-id sequence.
    #[serde(default)]
    pub context_length: Option<usize>,
}

impl Sidecar {
    pub fn is_text_encoder(&self) -> bool {
        self.context_length.is_some()
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let fail = |message: String| Error::Sidecar {
            path: path.to_path_buf(),
            message,
        };
        if let Some(scale) = self.logit_scale {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(fail(format!("logit_scale must be positive, got {scale}")));
            }
        }
        if let Some(len) = self.context_length {
            if len < 2 {
                return Err(fail(format!("context_length must be at least 2, got {len}")));
            }
            return Ok(());
        }
        let input = &self.input;
        if input.channels != 1 && input.channels != 3 {
            return Err(fail(format!("channels must be 1 or 3, got {}", input.channels)));
        }
        if input.mean.len() != input.channels || input.std.len() != input.channels {
            return Err(fail(format!(
                "mean/std need {} entries, got {}/{}",
                input.channels,
                input.mean.len(),
                input.std.len()
            )));
        }
        if input.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(fail("std entries must be positive".into()));
        }
        if input.mean.iter().any(|m| !m.is_finite()) {
            return Err(fail("mean entries must be finite".into()));
        }
        if input.h == Some(0) || input.w == Some(0) {
            return Err(fail("input dimensions must be positive".into()));
        }
        if input.resize_policy != ResizePolicy::None && (input.h.is_none() || input.w.is_none()) {
            return Err(fail(format!(
                "resize policy {:?} needs fixed h and w",
                input.resize_policy
            )));
        }
        Ok(())
    }
}

/// Path of the sidecar belonging to a model file: `x.onnx` → `x.meta.json`.
pub fn sidecar_path(model: &Path) -> PathBuf {
    model.with_extension("meta.json")
}

/// A loaded graph with resolved output taps.
pub struct ModelHandle {
    graph_id: String,
    path: PathBuf,
    sidecar: Sidecar,
    tap_names: Vec<String>,
    outputs: Vec<String>,
    model: InferenceModel,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("graph_id", &self.graph_id)
            .field("path", &self.path)
            .field("outputs", &self.outputs)
            .finish()
    }
}

fn outlet_name(model: &InferenceModel, outlet: OutletId) -> String {
    model
        .outlet_label(outlet)
        .map(str::to_owned)
        .unwrap_or_else(|| model.node(outlet.node).name.clone())
}

/// Load `path` and select `tap_names` as its outputs. An empty tap list keeps
/// the graph's declared outputs.
pub fn load_model(path: impl AsRef<Path>, tap_names: &[&str]) -> Result<ModelHandle> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let meta_path = sidecar_path(path);
    if !meta_path.exists() {
        return Err(Error::Sidecar {
            path: meta_path,
            message: "sidecar not found next to model".into(),
        });
    }
    let sidecar: Sidecar = read_json(&meta_path).map_err(|e| Error::Sidecar {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    sidecar.validate(&meta_path)?;

    let model_err = |e: TractError| Error::Model {
        path: path.to_path_buf(),
        message: format!("{e:#}"),
    };
    let mut model = tract_onnx::onnx()
        .model_for_read(&mut bytes.as_slice())
        .map_err(model_err)?;

    let available: Vec<String> = model
        .output_outlets()
        .map_err(model_err)?
        .iter()
        .map(|&o| outlet_name(&model, o))
        .collect();

    let outputs: Vec<String> = if tap_names.is_empty() {
        available.clone()
    } else {
        let mut outlets = Vec::with_capacity(tap_names.len());
        for tap in tap_names {
            let outlet = model
                .output_outlets()
                .map_err(model_err)?
                .iter()
                .copied()
                .find(|&o| outlet_name(&model, o) == *tap)
                .ok_or_else(|| Error::UnknownTap {
                    tap: tap.to_string(),
                    available: available.clone(),
                })?;
            outlets.push(outlet);
        }
        model.select_output_outlets(&outlets).map_err(model_err)?;
        tap_names.iter().map(|s| s.to_string()).collect()
    };

    let digest = Sha256::digest(&bytes);
    Ok(ModelHandle {
        graph_id: hex::encode(&digest[..8]),
        path: path.to_path_buf(),
        sidecar,
        tap_names: tap_names.iter().map(|s| s.to_string()).collect(),
        outputs,
        model,
    })
}

impl ModelHandle {
    /// Content hash of the graph file.
    pub fn graph_id(&self) -> &str {
        &self.graph_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn sidecar(&self) -> &Sidecar {
        &self.sidecar
    }

    pub fn input_spec(&self) -> &InputSpec {
        &self.sidecar.input
    }

    pub fn tap_names(&self) -> &[String] {
        &self.tap_names
    }

    pub fn output_names(&self) -> &[String] {
        &self.outputs
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            handle: self,
            plans: HashMap::new(),
        }
    }
}

/// Preprocessed image, channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} tensor",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image tensor has non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    fn to_nchw(&self) -> Tensor {
        tract_ndarray::Array4::from_shape_fn((1, self.channels, self.height, self.width), |(_, c, y, x)| {
            self.at(y, x, c)
        })
        .into_tensor()
    }
}

/// Resize (per policy) and normalize `raw` into the model's input space.
pub fn preprocess_image(raw: &RgbImage, spec: &InputSpec) -> Result<ImageTensor> {
    let (w, h) = raw.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("image has zero size".into()));
    }
    if spec.mean.len() != spec.channels || spec.std.len() != spec.channels {
        return Err(Error::Shape(format!(
            "preprocessing spec has {} channels but {}/{} mean/std entries",
            spec.channels,
            spec.mean.len(),
            spec.std.len()
        )));
    }

    let resized = match spec.resize_policy {
        ResizePolicy::None => {
            if spec.h.is_some_and(|t| t != h as usize) || spec.w.is_some_and(|t| t != w as usize) {
                return Err(Error::Shape(format!(
                    "image is {h}x{w} but the model expects {:?}x{:?} without resizing",
                    spec.h, spec.w
                )));
            }
            None
        }
        ResizePolicy::Exact => {
            let (th, tw) = fixed_size(spec)?;
            Some(imageops::resize(raw, tw as u32, th as u32, FilterType::CatmullRom))
        }
        ResizePolicy::ShortestEdgeCenterCrop => {
            let (th, tw) = fixed_size(spec)?;
            let scale = f64::max(th as f64 / h as f64, tw as f64 / w as f64);
            let nh = ((h as f64 * scale).floor() as usize).max(th);
            let nw = ((w as f64 * scale).floor() as usize).max(tw);
            let scaled = imageops::resize(raw, nw as u32, nh as u32, FilterType::CatmullRom);
            let top = (nh - th) / 2;
            let left = (nw - tw) / 2;
            Some(imageops::crop_imm(&scaled, left as u32, top as u32, tw as u32, th as u32).to_image())
        }
    };
    let src = resized.as_ref().unwrap_or(raw);
    let (w, h) = (src.width() as usize, src.height() as usize);

    let mut values = Vec::with_capacity(w * h * spec.channels);
    for p in src.pixels() {
        match spec.channels {
            3 => {
                for c in 0..3 {
                    values.push((p.0[c] as f32 / 255.0 - spec.mean[c]) / spec.std[c]);
                }
            }
            1 => {
                let luma = image::Pixel::to_luma(p).0[0];
                values.push((luma as f32 / 255.0 - spec.mean[0]) / spec.std[0]);
            }
            n => return Err(Error::Shape(format!("unsupported channel count {n}"))),
        }
    }
    ImageTensor::new(h, w, spec.channels, values)
}

fn fixed_size(spec: &InputSpec) -> Result<(usize, usize)> {
    match (spec.h, spec.w) {
        (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::Shape("resize policy needs a fixed target size".into())),
    }
}

/// One tapped activation, channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        name: impl Into<String>,
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} feature map",
                values.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            height,
            width,
            channels,
            values,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    pub maps: Vec<FeatureMap>,
    /// `(H, W)` of the image the maps were computed from.
    pub source_image_size: (usize, usize),
}

/// Input accepted by [`Session::run_embedding`].
#[derive(Debug, Clone, Copy)]
pub enum EmbeddingInput<'a> {
    Image(&'a ImageTensor),
    Tokens(&'a [i64]),
}

/// Per-worker inference state: compiled plans keyed by input shape.
pub struct Session<'h> {
    handle: &'h ModelHandle,
    plans: HashMap<Vec<usize>, Arc<TypedRunnableModel>>,
}

impl<'h> Session<'h> {
    pub fn handle(&self) -> &'h ModelHandle {
        self.handle
    }

    fn plan(&mut self, shape: &[usize], datum: DatumType) -> Result<Arc<TypedRunnableModel>> {
        if let Some(plan) = self.plans.get(shape) {
            return Ok(plan.clone());
        }
        let handle = self.handle;
        let err = |e: TractError| Error::Model {
            path: handle.path.clone(),
            message: format!("{e:#}"),
        };
        let fact = InferenceFact::dt_shape(datum, shape);
        let plan = handle
            .model
            .clone()
            .with_input_fact(0, fact)
            .map_err(err)?
            .into_optimized()
            .map_err(err)?
            .into_runnable()
            .map_err(err)?;
        log::debug!("compiled {} for input {:?}", handle.path.display(), shape);
        self.plans.insert(shape.to_vec(), plan.clone());
        Ok(plan)
    }

    fn check_image(&self, input: &ImageTensor) -> Result<()> {
        let spec = &self.handle.sidecar.input;
        if self.handle.sidecar.is_text_encoder() {
            return Err(Error::Shape("text encoder expects token ids, got an image".into()));
        }
        if input.channels != spec.channels
            || spec.h.is_some_and(|h| h != input.height)
            || spec.w.is_some_and(|w| w != input.width)
        {
            return Err(Error::Shape(format!(
                "input {}x{}x{} does not match model spec {:?}x{:?}x{}",
                input.height, input.width, input.channels, spec.h, spec.w, spec.channels
            )));
        }
        Ok(())
    }

    fn run(&mut self, input: Tensor) -> Result<TVec<TValue>> {
        let plan = self.plan(input.shape(), input.datum_type())?;
        plan.run(tvec!(input.into()))
            .map_err(|e| Error::Inference(format!("{e:#}")))
    }

    /// Run the backbone and return every selected tap as a channels-last map.
    pub fn run_feature_taps(&mut self, input: &ImageTensor) -> Result<FeatureMapStack> {
        self.check_image(input)?;
        let outputs = self.run(input.to_nchw())?;
        let mut maps = Vec::with_capacity(outputs.len());
        for (name, value) in self.handle.outputs.iter().zip(outputs.iter()) {
            let view = value
                .to_plain_array_view::<f32>()
                .map_err(|e| Error::Inference(format!("{e:#}")))?;
            let shape = view.shape();
            if shape.len() != 4 || shape[0] != 1 {
                return Err(Error::Shape(format!("tap `{name}` has shape {shape:?}, expected [1,C,H,W]")));
            }
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let mut values = Vec::with_capacity(c * h * w);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        values.push(view[[0, ch, y, x]]);
                    }
                }
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Inference(format!("tap `{name}` produced non-finite values")));
            }
            maps.push(FeatureMap::new(name.clone(), h, w, c, values)?);
        }
        Ok(FeatureMapStack {
            maps,
            source_image_size: (input.height, input.width),
        })
    }

    /// Run an encoder and return its (unnormalized) embedding.
    pub fn run_embedding(&mut self, input: EmbeddingInput<'_>) -> Result<Vec<f32>> {
        let tensor = match input {
            EmbeddingInput::Image(image) => {
                self.check_image(image)?;
                image.to_nchw()
            }
            EmbeddingInput::Tokens(ids) => {
                let expected = self.handle.sidecar.context_length.ok_or_else(|| {
                    Error::Shape("image encoder expects an image, got token ids".into())
                })?;
                if ids.len() != expected {
                    return Err(Error::Shape(format!(
                        "token sequence has {} ids, model context length is {expected}",
                        ids.len()
                    )));
                }
                tract_ndarray::Array2::from_shape_vec((1, ids.len()), ids.to_vec())
                    .map_err(|e| Error::Shape(e.to_string()))?
                    .into_tensor()
            }
        };
        let outputs = self.run(tensor)?;
        let first = outputs
            .first()
            .ok_or_else(|| Error::Inference("graph produced no outputs".into()))?;
        let view = first
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Inference(format!("{e:#}")))?;
        let embedding: Vec<f32> = view.iter().copied().collect();
        if embedding.len() != EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "embedding has {} values, expected {EMBEDDING_DIM}",
                embedding.len()
            )));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Inference("embedding has non-finite values".into()));
        }
        Ok(embedding)
    }
}

/// Logistic sigmoid.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Swish activation `a · σ(a)`.
#[inline]
pub fn swish(a: f64) -> f64 {
    a * sigmoid(a)
}

pub fn swish_all(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&a| swish(a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(policy: ResizePolicy, h: Option<usize>, w: Option<usize>) -> InputSpec {
        InputSpec {
            h,
            w,
            channels: 3,
            mean: vec![0.5, 0.25, 0.75],
            std: vec![0.5, 0.5, 0.25],
            resize_policy: policy,
        }
    }

    #[test]
    fn swish_reference_values() {
        assert_eq!(swish(0.0), 0.0);
        assert!((swish(1.0) - 0.73106).abs() < 1e-5);
        assert!((swish(-1.0) + 0.26894).abs() < 1e-5);
        // swish(-a) = -a + swish(a)
        for a in [0.3, 1.0, 4.5] {
            assert!((swish(-a) - (-a + swish(a))).abs() < 1e-12);
        }
    }

    #[test]
    fn preprocess_without_resize_keeps_shape() {
        let img = RgbImage::new(640, 480);
        let t = preprocess_image(&img, &spec(ResizePolicy::None, None, None)).unwrap();
        assert_eq!((t.height, t.width, t.channels), (480, 640, 3));
    }

    #[test]
    fn preprocess_center_crop_to_square() {
        let img = RgbImage::new(500, 375);
        let t = preprocess_image(
            &img,
            &spec(ResizePolicy::ShortestEdgeCenterCrop, Some(224), Some(224)),
        )
        .unwrap();
        assert_eq!((t.height, t.width, t.channels), (224, 224, 3));
    }

    #[test]
    fn preprocess_exact_resize() {
        let img = RgbImage::new(50, 20);
        let t = preprocess_image(&img, &spec(ResizePolicy::Exact, Some(8), Some(16))).unwrap();
        assert_eq!((t.height, t.width), (8, 16));
    }

    #[test]
    fn constant_image_at_channel_means_normalizes_to_zero() {
        let levels = [100u8, 30, 250];
        let img = RgbImage::from_pixel(7, 5, image::Rgb(levels));
        let mut s = spec(ResizePolicy::None, None, None);
        s.mean = levels.iter().map(|&v| v as f32 / 255.0).collect();
        let t = preprocess_image(&img, &s).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preprocess_rejects_bad_inputs() {
        let empty = RgbImage::new(0, 4);
        assert!(preprocess_image(&empty, &spec(ResizePolicy::None, None, None)).is_err());
        let img = RgbImage::new(4, 4);
        let mut bad = spec(ResizePolicy::None, None, None);
        bad.mean.pop();
        assert!(matches!(preprocess_image(&img, &bad), Err(Error::Shape(_))));
        let fixed = spec(ResizePolicy::None, Some(8), Some(8));
        assert!(matches!(preprocess_image(&img, &fixed), Err(Error::Shape(_))));
    }

    #[test]
    fn image_tensor_validates() {
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn sidecar_path_replaces_extension() {
        assert_eq!(
            sidecar_path(Path::new("/m/backbone.onnx")),
            PathBuf::from("/m/backbone.meta.json")
        );
    }
}
