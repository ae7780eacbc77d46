//! Pixel-wise latent features: resample tapped maps onto one grid, flatten,
//! standardize, decompose, and pick the cluster count from the spectrum.

use std::path::Path;

use image::GrayImage;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::{FeatureMap, FeatureMapStack};

/// Grid height used by the enlarged mode.
pub const ENLARGED_HEIGHT: usize = 64;
pub const DEFAULT_MAX_INSPECT: usize = 20;
pub const K_MIN: usize = 2;
pub const K_MAX: usize = 12;
pub const K_FALLBACK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every map resampled to the deepest tap's grid.
    #[serde(alias = "ovsri")]
    Native,
    /// Every map resampled to 64 rows and a width that keeps the image aspect.
    #[default]
    #[serde(alias = "ovsri2")]
    Enlarged,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Native => "native",
            Mode::Enlarged => "enlarged",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "native" | "ovsri" => Ok(Mode::Native),
            "enlarged" | "ovsri2" => Ok(Mode::Enlarged),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

/// Concatenated feature maps on a common grid, channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub mode: Mode,
}

impl AlignedFeatureGrid {
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }
}

/// Width of the enlarged grid for an `h`×`w` image: `ceil(64·w/h)`.
pub fn enlarged_width(image_h: usize, image_w: usize) -> usize {
    (ENLARGED_HEIGHT * image_w).div_ceil(image_h)
}

/// Common grid `(h, w)` for `stack` under `mode`.
pub fn target_grid(stack: &FeatureMapStack, mode: Mode) -> Result<(usize, usize)> {
    if stack.maps.is_empty() {
        return Err(Error::InvalidArgument("feature map stack is empty".into()));
    }
    let grid = match mode {
        Mode::Native => {
            // The deepest tap has the coarsest grid; later taps win ties.
            let deepest = stack
                .maps
                .iter()
                .rev()
                .min_by_key(|m| m.height * m.width)
                .expect("non-empty");
            (deepest.height, deepest.width)
        }
        Mode::Enlarged => {
            let (h, w) = stack.source_image_size;
            if h == 0 || w == 0 {
                return Err(Error::Shape(format!("source image size {h}x{w}")));
            }
            (ENLARGED_HEIGHT, enlarged_width(h, w))
        }
    };
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::Shape(format!("zero-area target grid {}x{}", grid.0, grid.1)));
    }
    Ok(grid)
}

/// Per-output `(source index, weight)` taps of a triangle filter. Downscaling
/// widens the filter by the scale factor so every source cell contributes.
fn axis_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    if in_len == out_len {
        return (0..out_len).map(|o| vec![(o, 1.0)]).collect();
    }
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(in_len - 1);
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|i| {
                    let w = 1.0 - (i as f64 - center).abs() / support;
                    (w > 0.0).then_some((i, w))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Bilinear resample of one map (antialiased when shrinking), channels-last.
pub fn resample_map(map: &FeatureMap, out_h: usize, out_w: usize) -> Vec<f64> {
    let c = map.channels;
    let rows = axis_weights(map.height, out_h);
    let cols = axis_weights(map.width, out_w);
    // Horizontal pass first: map.height × out_w × c.
    let mut tmp = vec![0.0f64; map.height * out_w * c];
    for y in 0..map.height {
        for (x, taps) in cols.iter().enumerate() {
            let dst = &mut tmp[(y * out_w + x) * c..][..c];
            for &(sx, w) in taps {
                let src = &map.values[(y * map.width + sx) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f64; out_h * out_w * c];
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..out_w {
            let dst = &mut out[(y * out_w + x) * c..][..c];
            for &(sy, w) in taps {
                let src = &tmp[(sy * out_w + x) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    out
}

/// Resample every map onto the mode's grid and concatenate channels in tap order.
pub fn resize_feature_maps(stack: &FeatureMapStack, mode: Mode) -> Result<AlignedFeatureGrid> {
    let (h, w) = target_grid(stack, mode)?;
    let channels: usize = stack.maps.iter().map(|m| m.channels).sum();
    let mut values = vec![0.0f64; h * w * channels];
    let mut offset = 0;
    for map in &stack.maps {
        let resampled = resample_map(map, h, w);
        for p in 0..h * w {
            values[p * channels + offset..][..map.channels]
                .copy_from_slice(&resampled[p * map.channels..][..map.channels]);
        }
        offset += map.channels;
    }
    Ok(AlignedFeatureGrid {
        height: h,
        width: w,
        channels,
        values,
        mode,
    })
}

/// `n × d` matrix with one row per grid cell, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureMatrix {
    pub values: DMatrix<f64>,
    pub grid_shape: (usize, usize),
}

impl PixelFeatureMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }
}

pub fn build_pixel_matrix(grid: &AlignedFeatureGrid) -> PixelFeatureMatrix {
    let n = grid.height * grid.width;
    PixelFeatureMatrix {
        values: DMatrix::from_row_slice(n, grid.channels, &grid.values),
        grid_shape: (grid.height, grid.width),
    }
}

/// Inverse of [`build_pixel_matrix`].
pub fn reshape_to_grid(m: &PixelFeatureMatrix, mode: Mode) -> AlignedFeatureGrid {
    let (h, w) = m.grid_shape;
    let d = m.d();
    let mut values = Vec::with_capacity(h * w * d);
    for r in 0..m.n() {
        values.extend(m.values.row(r).iter());
    }
    AlignedFeatureGrid {
        height: h,
        width: w,
        channels: d,
        values,
        mode,
    }
}

/// Per-column z-score with the population standard deviation. Constant
/// columns become zero.
pub fn normalize_features(m: &PixelFeatureMatrix) -> Result<PixelFeatureMatrix> {
    let n = m.n();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("normalization needs at least 2 rows, got {n}")));
    }
    let mut out = m.values.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let magnitude = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if std <= 8.0 * f64::EPSILON * magnitude || std == 0.0 {
            col.fill(0.0);
        } else {
            for v in col.iter_mut() {
                *v = (*v - mean) / std;
            }
        }
    }
    Ok(PixelFeatureMatrix {
        values: out,
        grid_shape: m.grid_shape,
    })
}

/// Thin decomposition `A = U·diag(S)·Vᵀ` with descending `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

/// Thin SVD. Columns are ordered by descending singular value and each
/// column of `V` has its largest-magnitude entry positive.
pub fn svd(a: &DMatrix<f64>) -> Result<Svd> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("SVD input contains non-finite values".into()));
    }
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::Shape(format!("SVD of empty {}x{} matrix", a.nrows(), a.ncols())));
    }
    let dec = a
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = dec.u.expect("requested U");
    let v_t = dec.v_t.expect("requested V");
    let r = dec.singular_values.len();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));

    let mut s = Vec::with_capacity(r);
    let mut u_out = DMatrix::zeros(a.nrows(), r);
    let mut v_out = DMatrix::zeros(a.ncols(), r);
    for (dst, &src) in order.iter().enumerate() {
        s.push(dec.singular_values[src]);
        let v_col = v_t.row(src).transpose();
        let pivot = v_col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        v_out.set_column(dst, &(v_col * sign));
        u_out.set_column(dst, &(u.column(src) * sign));
    }
    Ok(Svd { u: u_out, s, v: v_out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumAnalysis {
    #[serde(rename = "sigma")]
    pub singular_values: Vec<f64>,
    /// `d2[j]` is the second difference at 1-based position `j + 2`.
    #[serde(rename = "d2")]
    pub second_differences: Vec<f64>,
    /// 1-based position of the first negative second difference.
    #[serde(rename = "p")]
    pub slowdown_position: Option<usize>,
    pub k: usize,
}

impl SpectrumAnalysis {
    pub fn second_difference_at(&self, position: usize) -> Option<f64> {
        position.checked_sub(2).and_then(|j| self.second_differences.get(j).copied())
    }
}

/// Cluster count from the first slowdown of the spectrum: the first 1-based
/// position `p` among the leading `max_inspect` values where
/// `σ[p−1] − 2σ[p] + σ[p+1]` is negative gives `k = clamp(p − 1, 2, 12)`;
/// without one, `k = 5`.
pub fn adaptive_k(spectrum: &[f64], max_inspect: usize) -> Result<SpectrumAnalysis> {
    if spectrum.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "adaptive k needs at least 3 singular values, got {}",
            spectrum.len()
        )));
    }
    if max_inspect < 3 {
        return Err(Error::InvalidArgument(format!("max_inspect {max_inspect} is below 3")));
    }
    let m = spectrum.len().min(max_inspect);
    let d2: Vec<f64> = (2..m)
        .map(|i| spectrum[i - 2] - 2.0 * spectrum[i - 1] + spectrum[i])
        .collect();
    // Relative to σ₁ so rounding noise on flat spectra never reads as a slowdown.
    let tol = 1e-9 * spectrum[0].abs();
    let p = d2.iter().position(|&v| v < -tol).map(|j| j + 2);
    let k = match p {
        Some(p) => (p - 1).clamp(K_MIN, K_MAX),
        None => K_FALLBACK,
    };
    Ok(SpectrumAnalysis {
        singular_values: spectrum.to_vec(),
        second_differences: d2,
        slowdown_position: p,
        k,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPixelFeatures {
    /// `n × k` coordinates along the leading right singular vectors.
    pub projections: DMatrix<f64>,
    pub spectrum: SpectrumAnalysis,
    pub grid_shape: (usize, usize),
}

impl LatentPixelFeatures {
    pub fn k(&self) -> usize {
        self.projections.ncols()
    }
}

/// `m · V[:, ..k]`.
pub fn project_latent(
    m: &PixelFeatureMatrix,
    v: &DMatrix<f64>,
    k: usize,
    spectrum: SpectrumAnalysis,
) -> Result<LatentPixelFeatures> {
    if k == 0 || k > v.ncols() {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", v.ncols())));
    }
    if v.nrows() != m.d() {
        return Err(Error::Shape(format!("V has {} rows for {} channels", v.nrows(), m.d())));
    }
    Ok(LatentPixelFeatures {
        projections: &m.values * v.columns(0, k),
        spectrum,
        grid_shape: m.grid_shape,
    })
}

/// Full chain from tapped maps to latent features. `k_override` skips the
/// spectrum rule; either way `k` never exceeds the rank.
pub fn compute_latent(
    stack: &FeatureMapStack,
    mode: Mode,
    max_inspect: usize,
    k_override: Option<usize>,
) -> Result<LatentPixelFeatures> {
    let grid = resize_feature_maps(stack, mode)?;
    let matrix = normalize_features(&build_pixel_matrix(&grid))?;
    let dec = svd(&matrix.values)?;
    let mut spectrum = adaptive_k(&dec.s, max_inspect)?;
    if let Some(k) = k_override {
        spectrum.k = k;
    }
    let k = spectrum.k.min(dec.rank());
    project_latent(&matrix, &dec.v, k, spectrum)
}

pub fn write_spectrum_json(path: &Path, spectrum: &SpectrumAnalysis) -> Result<()> {
    let json = serde_json::to_vec_pretty(spectrum).expect("spectrum serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Each projection column as a grid-sized grayscale image, min-max scaled.
pub fn latent_map_images(latent: &LatentPixelFeatures) -> Vec<GrayImage> {
    let (h, w) = latent.grid_shape;
    latent
        .projections
        .column_iter()
        .map(|col| {
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            GrayImage::from_fn(w as u32, h as u32, |x, y| {
                let v = col[y as usize * w + x as usize];
                let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
                image::Luma([(t * 255.0).round() as u8])
            })
        })
        .collect()
}
