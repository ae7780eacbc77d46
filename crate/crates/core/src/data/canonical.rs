//! Canonical dataset layout:
//!
//! ```text
//! root/dataset.json
//! root/images/<id>.<ext>
//! root/masks/<id>.png      16-bit grayscale, pixel = instance id
//! ```
//!
//! Instance id 0 is background and 65535 marks ignored pixels. The manifest
//! maps every other id to a vocabulary label.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::png_io::{read_index_png, write_gray16};
use super::{CanonicalDataset, DatasetSample, GtSource};
use crate::error::{read_json, Error, Result};
use crate::eval::MaskSet;
use crate::mask::BinaryMask;
use crate::text::Vocabulary;

pub const MANIFEST_NAME: &str = "dataset.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const IGNORE_ID: u16 = u16::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub schema_version: u32,
    pub vocabulary: Vocabulary,
    pub images: Vec<ManifestImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub file: String,
    pub mask: String,
    /// Instance id (decimal string) → label.
    pub instances: BTreeMap<String, String>,
}

fn parse_instances(img: &ManifestImage, vocab: &Vocabulary) -> Result<BTreeMap<u16, String>> {
    img.instances
        .iter()
        .map(|(k, label)| {
            let id: u16 = k
                .parse()
                .ok()
                .filter(|&id| id != 0 && id != IGNORE_ID)
                .ok_or_else(|| Error::Dataset(format!("image `{}`: invalid instance id `{k}`", img.id)))?;
            if !vocab.contains(label) {
                return Err(Error::Dataset(format!(
                    "image `{}`: instance {id} has label `{label}` outside the vocabulary",
                    img.id
                )));
            }
            Ok((id, label.clone()))
        })
        .collect()
}

/// Load and cross-check a canonical dataset; samples keep manifest order.
pub fn load_canonical(root: &Path) -> Result<CanonicalDataset> {
    let manifest_path = root.join(MANIFEST_NAME);
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported schema_version {}",
            manifest_path.display(),
            manifest.schema_version
        )));
    }
    manifest.vocabulary.validate()?;
    let mut ids = HashSet::new();
    let mut samples = Vec::with_capacity(manifest.images.len());
    for img in &manifest.images {
        if !ids.insert(img.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate image id `{}`", img.id)));
        }
        let instances = parse_instances(img, &manifest.vocabulary)?;
        let image_path = root.join(&img.file);
        if !image_path.exists() {
            return Err(Error::Dataset(format!(
                "image `{}`: missing file {}",
                img.id,
                image_path.display()
            )));
        }
        let mask_path = root.join(&img.mask);
        let mask = read_index_png(&mask_path)?;
        let (iw, ih) = image::image_dimensions(&image_path)?;
        if (ih as usize, iw as usize) != (mask.height, mask.width) {
            return Err(Error::Dataset(format!(
                "image `{}`: mask is {}x{} but the image is {ih}x{iw}",
                img.id, mask.height, mask.width
            )));
        }
        let present: BTreeSet<u16> = mask
            .values
            .iter()
            .copied()
            .filter(|&v| v != 0 && v != IGNORE_ID)
            .collect();
        if let Some(id) = present.iter().find(|id| !instances.contains_key(id)) {
            return Err(Error::Dataset(format!(
                "image `{}`: instance id {id} appears in {} but not in the manifest",
                img.id,
                mask_path.display()
            )));
        }
        if let Some(id) = instances.keys().find(|id| !present.contains(id)) {
            return Err(Error::Dataset(format!(
                "image `{}`: manifest instance {id} has no pixels in {}",
                img.id,
                mask_path.display()
            )));
        }
        samples.push(DatasetSample {
            image_id: img.id.clone(),
            image_path,
            image_size: (mask.height, mask.width),
            gt: GtSource::Canonical {
                path: mask_path,
                instances,
            },
        });
    }
    Ok(CanonicalDataset {
        name: manifest.name,
        root: root.to_path_buf(),
        samples,
        vocabulary: manifest.vocabulary,
    })
}

pub(crate) fn decode_instance_png(
    path: &Path,
    instances: &BTreeMap<u16, String>,
    size: (usize, usize),
) -> Result<MaskSet> {
    let img = read_index_png(path)?;
    if (img.height, img.width) != size {
        return Err(Error::Dataset(format!("{}: unexpected mask size", path.display())));
    }
    let (h, w) = size;
    let mut masks = Vec::with_capacity(instances.len());
    let mut labels = Vec::with_capacity(instances.len());
    for (&id, label) in instances {
        masks.push(BinaryMask::from_fn(h, w, |y, x| img.values[y * w + x] == id));
        labels.push(label.clone());
    }
    if let Some(v) = img.values.iter().find(|&&v| v != 0 && v != IGNORE_ID && !instances.contains_key(&v)) {
        return Err(Error::Dataset(format!(
            "{}: instance id {v} is not in the manifest",
            path.display()
        )));
    }
    let ignore = img
        .values
        .contains(&IGNORE_ID)
        .then(|| BinaryMask::from_fn(h, w, |y, x| img.values[y * w + x] == IGNORE_ID));
    Ok(MaskSet::labelled(masks, labels)?.with_ignore(ignore))
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Write `ds` in canonical form under `out`. Overlapping instances resolve
/// to the later one. Returns the manifest path.
pub fn write_canonical(ds: &CanonicalDataset, out: &Path) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut images = Vec::with_capacity(ds.samples.len());
    for sample in &ds.samples {
        let gt = sample.ground_truth()?;
        let (h, w) = sample.image_size;
        if gt.masks.len() >= IGNORE_ID as usize {
            return Err(Error::Dataset(format!("image `{}` has too many instances", sample.image_id)));
        }
        let mut ids = vec![0u16; h * w];
        let mut overlaps = 0usize;
        for (i, m) in gt.masks.iter().enumerate() {
            for (p, _) in m.as_slice().iter().enumerate().filter(|(_, &v)| v) {
                overlaps += (ids[p] != 0) as usize;
                ids[p] = (i + 1) as u16;
            }
        }
        if overlaps > 0 {
            log::warn!("image `{}`: {overlaps} overlapping instance pixels", sample.image_id);
        }
        if let Some(ignore) = &gt.ignore {
            for (p, _) in ignore.as_slice().iter().enumerate().filter(|(_, &v)| v) {
                ids[p] = IGNORE_ID;
            }
        }
        let stem = file_stem_for(&sample.image_id);
        let ext = sample
            .image_path
            .extension()
            .map_or_else(|| "png".into(), |e| e.to_string_lossy().into_owned());
        let file = format!("images/{stem}.{ext}");
        let mask = format!("masks/{stem}.png");
        std::fs::copy(&sample.image_path, out.join(&file)).map_err(|e| Error::io(&sample.image_path, e))?;
        write_gray16(&out.join(&mask), w, h, &ids)?;

        let present: BTreeSet<u16> = ids.iter().copied().filter(|&v| v != 0 && v != IGNORE_ID).collect();
        let labels = gt.labels.unwrap_or_default();
        let instances = present
            .iter()
            .map(|&id| (id.to_string(), labels[id as usize - 1].clone()))
            .collect();
        images.push(ManifestImage {
            id: sample.image_id.clone(),
            file,
            mask,
            instances,
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        schema_version: MANIFEST_SCHEMA_VERSION,
        vocabulary: ds.vocabulary.clone(),
        images,
    };
    let path = out.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Category;

    fn write_minimal(root: &Path, mask_ids: &[u16], instances: &[(&str, &str)]) {
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        image::RgbImage::new(3, 2).save(root.join("images/a.png")).unwrap();
        write_gray16(&root.join("masks/a.png"), 3, 2, mask_ids).unwrap();
        let manifest = Manifest {
            name: "mini".into(),
            schema_version: 1,
            vocabulary: Vocabulary::new(vec![Category::new("cat", None)], true).unwrap(),
            images: vec![ManifestImage {
                id: "a".into(),
                file: "images/a.png".into(),
                mask: "masks/a.png".into(),
                instances: instances.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            }],
        };
        std::fs::write(root.join(MANIFEST_NAME), serde_json::to_string(&manifest).unwrap()).unwrap();
    }

    #[test]
    fn minimal_dataset() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path(), &[0, 1, 1, 0, 0, IGNORE_ID], &[("1", "cat")]);
        let ds = load_canonical(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        let gt = ds.samples[0].ground_truth().unwrap();
        assert_eq!(gt.len(), 1);
        assert_eq!(gt.masks[0].count(), 2);
        assert!(gt.ignore.unwrap().get(1, 2));
    }

    #[test]
    fn unmapped_instance_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path(), &[0, 1, 7, 0, 0, 0], &[("1", "cat")]);
        let err = load_canonical(dir.path()).unwrap_err().to_string();
        assert!(err.contains("instance id 7"), "{err}");
    }

    #[test]
    fn label_outside_vocabulary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path(), &[0, 1, 0, 0, 0, 0], &[("1", "dog")]);
        assert!(load_canonical(dir.path()).is_err());
    }

    #[test]
    fn rewrite_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path(), &[0, 1, 1, 0, 0, IGNORE_ID], &[("1", "cat")]);
        let ds = load_canonical(dir.path()).unwrap();
        let out = dir.path().join("copy");
        write_canonical(&ds, &out).unwrap();
        let again = load_canonical(&out).unwrap();
        assert_eq!(
            again.samples[0].ground_truth().unwrap(),
            ds.samples[0].ground_truth().unwrap()
        );
    }
}
