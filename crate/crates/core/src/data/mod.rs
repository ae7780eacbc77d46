//! Benchmark annotations and the canonical dataset format.
//!
//! Every loader returns a [`CanonicalDataset`]; ground-truth masks are
//! decoded on demand by [`DatasetSample::ground_truth`].

pub mod canonical;
pub mod coco;
pub mod png_io;
pub mod raster;
pub mod voc;

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

pub use canonical::{load_canonical, write_canonical};
pub use coco::load_coco;
pub use voc::{load_voc, voc_classes};

use crate::error::{Error, Result};
use crate::eval::MaskSet;
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub enum CocoSegmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoInstance {
    pub annotation_id: u64,
    pub label: String,
    pub segmentation: CocoSegmentation,
}

/// Where a sample's ground truth comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GtSource {
    Coco {
        instances: Vec<CocoInstance>,
        merge_per_class: bool,
    },
    /// Class-index palette PNG; `classes[i - 1]` names index `i`.
    Voc {
        path: PathBuf,
        classes: Arc<Vec<String>>,
    },
    /// 16-bit instance-id PNG with its id → label map.
    Canonical {
        path: PathBuf,
        instances: BTreeMap<u16, String>,
    },
    InMemory(MaskSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub image_id: String,
    pub image_path: PathBuf,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub gt: GtSource,
}

impl DatasetSample {
    /// Decode the ground-truth masks.
    pub fn ground_truth(&self) -> Result<MaskSet> {
        let (h, w) = self.image_size;
        match &self.gt {
            GtSource::InMemory(set) => Ok(set.clone()),
            GtSource::Coco {
                instances,
                merge_per_class,
            } => {
                let mut masks: Vec<crate::mask::BinaryMask> = Vec::with_capacity(instances.len());
                let mut labels = Vec::with_capacity(instances.len());
                for inst in instances {
                    let mask = match &inst.segmentation {
                        CocoSegmentation::Polygons(p) => raster::rasterize_polygons(p, h, w),
                        CocoSegmentation::Rle(counts) => raster::decode_uncompressed_rle(counts, h, w)
                            .map_err(|e| Error::Dataset(format!("annotation {}: {e}", inst.annotation_id)))?,
                    };
                    if *merge_per_class {
                        if let Some(pos) = labels.iter().position(|l| l == &inst.label) {
                            masks[pos] = masks[pos].union(&mask)?;
                            continue;
                        }
                    }
                    masks.push(mask);
                    labels.push(inst.label.clone());
                }
                MaskSet::labelled(masks, labels)
            }
            GtSource::Voc { path, classes } => voc::decode_class_png(path, classes, self.image_size),
            GtSource::Canonical { path, instances } => {
                canonical::decode_instance_png(path, instances, self.image_size)
            }
        }
    }

    /// Unique ground-truth category names.
    pub fn gt_label_set(&self) -> Result<BTreeSet<String>> {
        match &self.gt {
            GtSource::Coco { instances, .. } => Ok(instances.iter().map(|i| i.label.clone()).collect()),
            GtSource::Canonical { instances, .. } => Ok(instances.values().cloned().collect()),
            _ => Ok(self.ground_truth()?.label_set().into_iter().collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalDataset {
    pub name: String,
    pub root: PathBuf,
    pub samples: Vec<DatasetSample>,
    pub vocabulary: Vocabulary,
}

impl CanonicalDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn truncate(&mut self, limit: Option<usize>) {
        if let Some(n) = limit {
            self.samples.truncate(n);
        }
    }
}
