//! COCO instance annotations (polygons and uncompressed RLE).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{CanonicalDataset, CocoInstance, CocoSegmentation, DatasetSample, GtSource};
use crate::error::{read_file, Error, Result};
use crate::text::{Category, Vocabulary};

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    categories: Vec<CocoCategory>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    height: usize,
    width: usize,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default)]
    supercategory: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    segmentation: serde_json::Value,
    #[serde(default)]
    iscrowd: u8,
}

fn parse_segmentation(ann: &CocoAnnotation, h: usize, w: usize) -> Result<CocoSegmentation> {
    let bad = |msg: &str| Error::Dataset(format!("annotation {}: {msg}", ann.id));
    match &ann.segmentation {
        serde_json::Value::Array(polys) => {
            let polys = polys
                .iter()
                .map(|p| {
                    p.as_array()
                        .ok_or_else(|| bad("polygon is not an array"))?
                        .iter()
                        .map(|v| v.as_f64().ok_or_else(|| bad("non-numeric polygon coordinate")))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CocoSegmentation::Polygons(polys))
        }
        serde_json::Value::Object(rle) => {
            let counts = rle.get("counts").ok_or_else(|| bad("RLE without counts"))?;
            if counts.is_string() {
                return Err(Error::Unsupported(format!(
                    "annotation {} uses compressed RLE, which is not supported",
                    ann.id
                )));
            }
            let counts = counts
                .as_array()
                .ok_or_else(|| bad("RLE counts must be an array"))?
                .iter()
                .map(|v| v.as_u64().ok_or_else(|| bad("RLE counts must be non-negative integers")))
                .collect::<Result<Vec<u64>>>()?;
            if let Some(size) = rle.get("size").and_then(|s| s.as_array()) {
                let dims: Vec<u64> = size.iter().filter_map(|v| v.as_u64()).collect();
                if dims != [h as u64, w as u64] {
                    return Err(bad(&format!("RLE size {dims:?} does not match image {h}x{w}")));
                }
            }
            Ok(CocoSegmentation::Rle(counts))
        }
        _ => Err(bad("unknown segmentation encoding")),
    }
}

/// Load COCO instances. Samples are ordered by numeric image id; crowd
/// annotations are skipped. With `merge_per_class` the instances of each
/// category are merged into one mask.
pub fn load_coco(
    annotation_json: &Path,
    image_dir: &Path,
    limit: Option<usize>,
    merge_per_class: bool,
) -> Result<CanonicalDataset> {
    let bytes = read_file(annotation_json)?;
    let file: CocoFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(annotation_json, e))?;

    let mut cats = file.categories;
    cats.sort_by_key(|c| c.id);
    let names: BTreeMap<u64, String> = cats.iter().map(|c| (c.id, c.name.clone())).collect();
    let vocabulary = Vocabulary::new(
        cats.iter()
            .map(|c| Category::new(c.name.clone(), c.supercategory.as_deref()))
            .collect(),
        true,
    )?;

    let mut images = file.images;
    images.sort_by_key(|i| i.id);
    if let Some(n) = limit {
        images.truncate(n);
    }
    let sizes: BTreeMap<u64, (usize, usize)> = images.iter().map(|i| (i.id, (i.height, i.width))).collect();

    let mut per_image: BTreeMap<u64, Vec<CocoInstance>> = BTreeMap::new();
    for ann in &file.annotations {
        let Some(&(h, w)) = sizes.get(&ann.image_id) else {
            continue;
        };
        if ann.iscrowd != 0 {
            continue;
        }
        let label = names.get(&ann.category_id).ok_or_else(|| {
            Error::Dataset(format!("annotation {}: unknown category {}", ann.id, ann.category_id))
        })?;
        per_image.entry(ann.image_id).or_default().push(CocoInstance {
            annotation_id: ann.id,
            label: label.clone(),
            segmentation: parse_segmentation(ann, h, w)?,
        });
    }

    let samples = images
        .into_iter()
        .map(|img| {
            let mut instances = per_image.remove(&img.id).unwrap_or_default();
            instances.sort_by_key(|i| i.annotation_id);
            DatasetSample {
                image_id: img.id.to_string(),
                image_path: image_dir.join(&img.file_name),
                image_size: (img.height, img.width),
                gt: GtSource::Coco {
                    instances,
                    merge_per_class,
                },
            }
        })
        .collect();
    let name = annotation_json
        .file_stem()
        .map_or_else(|| "coco".into(), |s| s.to_string_lossy().into_owned());
    Ok(CanonicalDataset {
        name,
        root: image_dir.to_path_buf(),
        samples,
        vocabulary,
    })
}
