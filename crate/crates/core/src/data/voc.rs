//! PASCAL VOC class-segmentation palette PNGs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::png_io::{probe, read_index_png};
use super::{CanonicalDataset, DatasetSample, GtSource};
use crate::error::{Error, Result};
use crate::eval::MaskSet;
use crate::mask::BinaryMask;
use crate::text::{Category, Vocabulary};

pub const VOC_IGNORE: u16 = 255;
const CLASS_TABLE: &str = include_str!("../../data/voc_classes.txt");
const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// `(index, name, super_category)` for the 20 VOC classes.
pub fn voc_classes() -> Vec<(u16, String, String)> {
    CLASS_TABLE
        .lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            let idx = parts.next().and_then(|s| s.parse().ok()).expect("bundled table is well formed");
            let name = parts.next().expect("bundled table is well formed").to_owned();
            let sup = parts.next().expect("bundled table is well formed").to_owned();
            (idx, name, sup)
        })
        .collect()
}

pub fn voc_vocabulary() -> Vocabulary {
    let cats = voc_classes()
        .into_iter()
        .map(|(_, n, s)| Category::new(n, Some(&s)))
        .collect();
    Vocabulary::new(cats, true).expect("bundled vocabulary is valid")
}

fn find_image(image_dir: &Path, stem: &str) -> Result<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| image_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Dataset(format!("no image for `{stem}` in {}", image_dir.display())))
}

/// One sample per PNG in `seg_dir`, sorted by file stem.
pub fn load_voc(image_dir: &Path, seg_dir: &Path, limit: Option<usize>) -> Result<CanonicalDataset> {
    let entries = std::fs::read_dir(seg_dir).map_err(|e| Error::io(seg_dir, e))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    if let Some(n) = limit {
        stems.truncate(n);
    }
    let classes: Arc<Vec<String>> = Arc::new(voc_classes().into_iter().map(|(_, n, _)| n).collect());
    let samples = stems
        .into_iter()
        .map(|stem| {
            let path = seg_dir.join(format!("{stem}.png"));
            let (w, h) = probe(&path)?;
            Ok(DatasetSample {
                image_path: find_image(image_dir, &stem)?,
                image_id: stem,
                image_size: (h, w),
                gt: GtSource::Voc {
                    path,
                    classes: classes.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CanonicalDataset {
        name: "voc".into(),
        root: image_dir.to_path_buf(),
        samples,
        vocabulary: voc_vocabulary(),
    })
}

/// One mask per class index present (ascending), 255 as ignore.
pub(crate) fn decode_class_png(path: &Path, classes: &[String], size: (usize, usize)) -> Result<MaskSet> {
    let img = read_index_png(path)?;
    if (img.height, img.width) != size {
        return Err(Error::Dataset(format!(
            "{}: {}x{} mask for a {}x{} image",
            path.display(),
            img.height,
            img.width,
            size.0,
            size.1
        )));
    }
    let mut present = vec![false; classes.len() + 1];
    let mut has_ignore = false;
    for &v in &img.values {
        match v {
            0 => {}
            VOC_IGNORE => has_ignore = true,
            v if (v as usize) <= classes.len() => present[v as usize] = true,
            v => {
                return Err(Error::Dataset(format!("{}: unknown class index {v}", path.display())));
            }
        }
    }
    let mut masks = Vec::new();
    let mut labels = Vec::new();
    for (idx, _) in present.iter().enumerate().filter(|(_, &p)| p) {
        masks.push(BinaryMask::from_fn(img.height, img.width, |y, x| {
            img.values[y * img.width + x] as usize == idx
        }));
        labels.push(classes[idx - 1].clone());
    }
    let ignore = has_ignore.then(|| {
        BinaryMask::from_fn(img.height, img.width, |y, x| img.values[y * img.width + x] == VOC_IGNORE)
    });
    Ok(MaskSet::labelled(masks, labels)?.with_ignore(ignore))
}
