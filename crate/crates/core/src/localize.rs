//! Morphological clean-up of cluster masks, connected components, area
//! filtering, and object crops.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::segment::SegmentationResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphParams {
    /// Opening structuring-element half-width; the element is `2r+1` square.
    pub opening_se: usize,
    pub dilation_se: usize,
    /// Fraction of the image area below which components are dropped.
    pub min_area_fraction: f64,
    /// Absolute floor for the area threshold, in pixels.
    pub min_area_px: usize,
}

impl Default for MorphParams {
    fn default() -> Self {
        Self {
            opening_se: 1,
            dilation_se: 1,
            min_area_fraction: 0.001,
            min_area_px: 50,
        }
    }
}

impl MorphParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.min_area_fraction) {
            return Err(Error::InvalidArgument(format!(
                "min_area_fraction {} outside [0, 1)",
                self.min_area_fraction
            )));
        }
        Ok(())
    }

    /// Smallest component area kept for an `h`×`w` image.
    pub fn min_area(&self, h: usize, w: usize) -> f64 {
        (self.min_area_fraction * (h * w) as f64).max(self.min_area_px as f64)
    }
}

/// Separable square-window reduction. `all` selects erosion (pixels outside
/// the image count as foreground) versus dilation (they count as background).
fn square_filter(mask: &BinaryMask, r: usize, all: bool) -> BinaryMask {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = mask.shape();
    let reduce = |mut window: std::ops::RangeInclusive<usize>, f: &dyn Fn(usize) -> bool| {
        if all {
            window.all(f)
        } else {
            window.any(f)
        }
    };
    let horizontal = BinaryMask::from_fn(h, w, |y, x| {
        let lo = x.saturating_sub(r);
        let hi = (x + r).min(w - 1);
        reduce(lo..=hi, &|xx| mask.get(y, xx))
    });
    BinaryMask::from_fn(h, w, |y, x| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        reduce(lo..=hi, &|yy| horizontal.get(yy, x))
    })
}

pub fn erode(mask: &BinaryMask, r: usize) -> BinaryMask {
    square_filter(mask, r, true)
}

pub fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    square_filter(mask, r, false)
}

pub fn opening(mask: &BinaryMask, r: usize) -> BinaryMask {
    dilate(&erode(mask, r), r)
}

/// Opening followed by dilation.
pub fn clean_mask(mask: &BinaryMask, p: &MorphParams) -> BinaryMask {
    if mask.is_empty() {
        return mask.clone();
    }
    dilate(&opening(mask, p.opening_se), p.dilation_se)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Mask cropped to `bbox`.
    pub mask: BinaryMask,
    pub area: usize,
    /// `(x0, y0, x1, y1)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
}

/// 8-connected components, largest first (ties in raster order of their
/// first pixel).
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = mask.shape();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || !mask.as_slice()[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = (p / w, p % w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if !seen[q] && mask.as_slice()[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &p in &pixels {
            let (y, x) = (p / w, p % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let mut local = BinaryMask::new(y1 - y0 + 1, x1 - x0 + 1);
        for &p in &pixels {
            local.set(p / w - y0, p % w - x0, true);
        }
        out.push(Component {
            mask: local,
            area: pixels.len(),
            bbox: (x0, y0, x1, y1),
        });
    }
    out.sort_by(|a, b| b.area.cmp(&a.area));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedObject {
    pub bbox: (usize, usize, usize, usize),
    pub area: usize,
    pub cluster_id: usize,
    pub crop: RgbImage,
    /// Component pixels within `bbox`.
    pub component_mask: BinaryMask,
}

impl LocalizedObject {
    /// The component as a full-image mask.
    pub fn full_mask(&self, h: usize, w: usize) -> BinaryMask {
        let (x0, y0, x1, y1) = self.bbox;
        BinaryMask::from_fn(h, w, |y, x| {
            (y0..=y1).contains(&y) && (x0..=x1).contains(&x) && self.component_mask.get(y - y0, x - x0)
        })
    }
}

/// Clean every cluster mask, split it into components, drop small ones, and
/// crop the survivors from the original image. Objects are ordered by
/// cluster, then by descending area.
pub fn extract_objects(
    image: &RgbImage,
    seg: &SegmentationResult,
    p: &MorphParams,
) -> Result<Vec<LocalizedObject>> {
    p.validate()?;
    let (h, w) = seg.image_size;
    if (image.height() as usize, image.width() as usize) != (h, w) {
        return Err(Error::Shape(format!(
            "image {}x{} does not match segmentation {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let min_area = p.min_area(h, w);
    let mut objects = Vec::new();
    for (cluster_id, mask) in seg.masks.iter().enumerate() {
        let cleaned = clean_mask(mask, p);
        for c in connected_components(&cleaned) {
            if (c.area as f64) < min_area {
                continue;
            }
            let (x0, y0, x1, y1) = c.bbox;
            let crop = image::imageops::crop_imm(
                image,
                x0 as u32,
                y0 as u32,
                (x1 - x0 + 1) as u32,
                (y1 - y0 + 1) as u32,
            )
            .to_image();
            objects.push(LocalizedObject {
                bbox: c.bbox,
                area: c.area,
                cluster_id,
                crop,
                component_mask: c.mask,
            });
        }
    }
    Ok(objects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::Mode;
    use crate::segment::labels_to_masks;

    fn block(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
    }

    #[test]
    fn empty_stays_empty() {
        let m = BinaryMask::new(8, 8);
        assert_eq!(clean_mask(&m, &MorphParams::default()), m);
    }

    #[test]
    fn isolated_pixel_is_removed() {
        let mut m = BinaryMask::new(9, 9);
        m.set(4, 4, true);
        assert!(opening(&m, 1).is_empty());
        assert!(clean_mask(&m, &MorphParams::default()).is_empty());
    }

    #[test]
    fn solid_block_grows_by_one() {
        let m = block(12, 12, 3, 3, 5);
        assert_eq!(opening(&m, 1), m);
        assert_eq!(clean_mask(&m, &MorphParams::default()), block(12, 12, 2, 2, 7));
    }

    #[test]
    fn border_touching_block_survives_opening() {
        let m = block(6, 6, 0, 0, 3);
        assert_eq!(opening(&m, 1), m);
        let full = BinaryMask::filled(5, 5);
        assert_eq!(opening(&full, 2), full);
    }

    #[test]
    fn components_basic() {
        assert!(connected_components(&BinaryMask::new(4, 4)).is_empty());
        let all = connected_components(&BinaryMask::filled(4, 4));
        assert_eq!(all.len(), 1);
        assert_eq!((all[0].area, all[0].bbox), (16, (0, 0, 3, 3)));
        let mut diag = BinaryMask::new(3, 3);
        diag.set(0, 0, true);
        diag.set(1, 1, true);
        assert_eq!(connected_components(&diag).len(), 1);
    }

    #[test]
    fn components_sorted_by_area() {
        let mut m = block(10, 10, 0, 0, 2);
        m = m.union(&block(10, 10, 5, 5, 4)).unwrap();
        let cs = connected_components(&m);
        assert_eq!(cs.iter().map(|c| c.area).collect::<Vec<_>>(), vec![16, 4]);
        assert_eq!(cs[0].bbox, (5, 5, 8, 8));
        assert_eq!(cs[0].mask.shape(), (4, 4));
    }

    #[test]
    fn thresholds() {
        let p = MorphParams::default();
        assert!((p.min_area(480, 640) - 307.2).abs() < 1e-9);
        assert_eq!(p.min_area(10, 10), 50.0);
        let bad = MorphParams {
            min_area_fraction: 1.0,
            ..p
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn whole_image_cluster_yields_one_object() {
        let img = RgbImage::from_fn(64, 48, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let seg = labels_to_masks(&[0; 4], (2, 2), (48, 64), Mode::Native).unwrap();
        let objs = extract_objects(&img, &seg, &MorphParams::default()).unwrap();
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0].bbox, (0, 0, 63, 47));
        assert_eq!(objs[0].crop, img);
    }

    #[test]
    fn small_cluster_is_dropped_and_split_cluster_gives_two_objects() {
        let (h, w) = (480, 640);
        let img = RgbImage::new(w as u32, h as u32);
        // Cluster 1: two 40×40 blobs; cluster 2: a 10-pixel sliver.
        let mut labels = vec![0usize; h * w];
        for y in 0..h {
            for x in 0..w {
                let a = (100..140).contains(&y) && (100..140).contains(&x);
                let b = (300..340).contains(&y) && (400..440).contains(&x);
                if a || b {
                    labels[y * w + x] = 1;
                }
                if y == 10 && (10..20).contains(&x) {
                    labels[y * w + x] = 2;
                }
            }
        }
        let seg = labels_to_masks(&labels, (h, w), (h, w), Mode::Native).unwrap();
        let objs = extract_objects(&img, &seg, &MorphParams::default()).unwrap();
        let from_one: Vec<_> = objs.iter().filter(|o| o.cluster_id == 1).collect();
        assert_eq!(from_one.len(), 2);
        assert!(objs.iter().all(|o| o.cluster_id != 2));
        assert_eq!(from_one[0].crop.dimensions(), (42, 42));
        for o in &objs {
            let full = o.full_mask(h, w);
            assert!(full.is_subset_of(&clean_mask(&seg.masks[o.cluster_id], &MorphParams::default())));
            assert_eq!(full.count(), o.area);
        }
    }
}
