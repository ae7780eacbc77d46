//! Files written by the command-line front end. Every JSON artifact carries
//! `schema_version` and the `config_hash` of the run that produced it.

use std::path::{Path, PathBuf};

use font8x8::UnicodeFonts;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::png_io::write_indexed;
use crate::error::{Error, Result};
use crate::eval::ObjectRecord;
use crate::latent::{Mode, SpectrumAnalysis};
use crate::palette;
use crate::recognize::{Label, SvdFit};
use crate::segment::SegmentationResult;
use crate::text::PromptTemplate;

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDump {
    pub schema_version: u32,
    pub config_hash: String,
    pub image: String,
    pub mode: Mode,
    /// `[height, width]` of the feature grid that was decomposed.
    pub grid: [usize; 2],
    #[serde(flatten)]
    pub spectrum: SpectrumAnalysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsDump {
    pub schema_version: u32,
    pub config_hash: String,
    pub image: String,
    pub template: PromptTemplate,
    pub use_svd: bool,
    pub svd_fit: SvdFit,
    pub theta: f64,
    /// Class order of every `probs` array; the open-set entry is last.
    pub classes: Vec<String>,
    pub objects: Vec<ObjectRecord>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).expect("artifact serializes");
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.labels.png` (palette PNG, pixel = cluster id + 1), one
/// `<stem>.mask_<i>.png` per cluster and `<stem>.spectrum.json` into `dir`.
pub fn write_segmentation(
    dir: &Path,
    stem: &str,
    seg: &SegmentationResult,
    spectrum: &SpectrumDump,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if seg.k > 254 {
        return Err(Error::InvalidArgument(format!("{} clusters do not fit a palette PNG", seg.k)));
    }
    let (h, w) = seg.image_size;
    let mut written = Vec::with_capacity(seg.k + 2);
    let labels: Vec<u8> = seg.labels_full.iter().map(|&l| (l + 1) as u8).collect();
    let path = dir.join(format!("{stem}.labels.png"));
    write_indexed(&path, w, h, &labels)?;
    written.push(path);
    for (i, m) in seg.masks.iter().enumerate() {
        let path = dir.join(format!("{stem}.mask_{i:02}.png"));
        m.to_gray_image().save(&path)?;
        written.push(path);
    }
    let path = dir.join(format!("{stem}.spectrum.json"));
    write_json(&path, spectrum)?;
    written.push(path);
    Ok(written)
}

const GLYPH: u32 = 8;

fn draw_rect(img: &mut RgbImage, bbox: [usize; 4], color: Rgb<u8>, thickness: u32) {
    let (w, h) = img.dimensions();
    let [x0, y0, x1, y1] = bbox.map(|v| v as u32);
    for t in 0..thickness {
        let (ax, ay) = (x0 + t, y0 + t);
        let (bx, by) = (x1.saturating_sub(t), y1.saturating_sub(t));
        if ax > bx || ay > by {
            break;
        }
        for x in ax..=bx.min(w - 1) {
            img.put_pixel(x, ay, color);
            img.put_pixel(x, by, color);
        }
        for y in ay..=by.min(h - 1) {
            img.put_pixel(ax, y, color);
            img.put_pixel(bx, y, color);
        }
    }
}

/// 8×8 bitmap text on a filled background box; clipped at the image edge.
pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, fg: Rgb<u8>, bg: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let width = GLYPH * text.chars().count() as u32 + 2;
    for yy in y..(y + GLYPH + 2).min(h) {
        for xx in x..(x + width).min(w) {
            img.put_pixel(xx, yy, bg);
        }
    }
    for (i, c) in text.chars().enumerate() {
        let glyph = font8x8::BASIC_FONTS.get(c).unwrap_or([0; 8]);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 1 {
                    let px = x + 1 + i as u32 * GLYPH + col;
                    let py = y + 1 + row as u32;
                    if px < w && py < h {
                        img.put_pixel(px, py, fg);
                    }
                }
            }
        }
    }
}

fn label_color(label: &Label, cluster_id: usize) -> Rgb<u8> {
    match label {
        Label::Rejected => Rgb([128, 128, 128]),
        _ => Rgb(palette::color(((cluster_id % 254) + 1) as u8)),
    }
}

/// Boxes and `label prob` captions over a copy of `image`.
pub fn render_overlay(image: &RgbImage, objects: &[ObjectRecord]) -> RgbImage {
    let mut out = image.clone();
    for o in objects {
        draw_rect(&mut out, o.bbox, label_color(&o.label, o.cluster_id), 2);
    }
    for o in objects {
        let caption = format!("{} {:.2}", o.label.as_str(), o.max_prob);
        let y = (o.bbox[1] as u32).saturating_sub(GLYPH + 2);
        draw_text(
            &mut out,
            o.bbox[0] as u32,
            y,
            &caption,
            Rgb([255, 255, 255]),
            label_color(&o.label, o.cluster_id),
        );
    }
    out
}
