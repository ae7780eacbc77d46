//! Agglomerative clustering of latent pixel features and conversion of
//! cluster labels into image-resolution masks.

use image::RgbImage;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentPixelFeatures, Mode};
use crate::mask::BinaryMask;
use crate::palette;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Ward,
    Average,
    Complete,
}

impl std::str::FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ward" => Ok(Linkage::Ward),
            "average" => Ok(Linkage::Average),
            "complete" => Ok(Linkage::Complete),
            other => Err(Error::InvalidArgument(format!("unknown linkage `{other}`"))),
        }
    }
}

/// One agglomeration step. `a` and `b` are representative point indices
/// (the smallest point index of each merged cluster).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

/// Merges sorted by non-decreasing height.
#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

/// Upper-triangular distance storage.
struct Condensed {
    n: usize,
    d: Vec<f64>,
}

impl Condensed {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.n * i - i * (i + 1) / 2 + j - i - 1
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.d[k] = v;
    }
}

fn initial_distances(points: &DMatrix<f64>, linkage: Linkage) -> Condensed {
    let n = points.nrows();
    let dims = points.ncols();
    // Row-major copy keeps the inner loop contiguous.
    let rows: Vec<f64> = (0..n).flat_map(|i| points.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        let a = &rows[i * dims..][..dims];
        for j in i + 1..n {
            let b = &rows[j * dims..][..dims];
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            d.push(match linkage {
                Linkage::Ward => sq,
                Linkage::Average | Linkage::Complete => sq.sqrt(),
            });
        }
    }
    Condensed { n, d }
}

/// Build the full merge tree with the nearest-neighbour-chain algorithm.
///
/// Ties go to the chain predecessor, otherwise to the lowest index, so the
/// result depends only on the input.
pub fn linkage(points: &DMatrix<f64>, method: Linkage) -> Result<Dendrogram> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot cluster zero points".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature values".into()));
    }
    let mut dist = initial_distances(points, method);
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    while active.len() > 1 {
        if chain.is_empty() {
            chain.push(active[0]);
        }
        let (x, y, dxy) = loop {
            let x = *chain.last().expect("chain non-empty");
            let prev = chain.len().checked_sub(2).map(|i| chain[i]);
            let mut best = prev;
            let mut best_d = prev.map_or(f64::INFINITY, |p| dist.get(x, p));
            for &y in &active {
                if y == x {
                    continue;
                }
                let d = dist.get(x, y);
                if d < best_d || (best.is_none() && d == best_d) {
                    best = Some(y);
                    best_d = d;
                }
            }
            let y = best.expect("at least two active clusters");
            if Some(y) == prev {
                chain.pop();
                chain.pop();
                break (x, y, best_d);
            }
            chain.push(y);
        };

        let (keep, drop) = if x < y { (x, y) } else { (y, x) };
        let (nk, nd) = (size[keep] as f64, size[drop] as f64);
        for &o in &active {
            if o == keep || o == drop {
                continue;
            }
            let dk = dist.get(o, keep);
            let dd = dist.get(o, drop);
            let updated = match method {
                Linkage::Ward => {
                    let no = size[o] as f64;
                    ((nk + no) * dk + (nd + no) * dd - no * dxy) / (nk + nd + no)
                }
                Linkage::Average => (nk * dk + nd * dd) / (nk + nd),
                Linkage::Complete => dk.max(dd),
            };
            dist.set(o, keep, updated);
        }
        size[keep] += size[drop];
        active.retain(|&i| i != drop);

        let height = match method {
            Linkage::Ward => dxy.max(0.0).sqrt(),
            _ => dxy,
        };
        merges.push(Merge {
            a: keep,
            b: drop,
            height,
            size: size[keep],
        });
    }
    merges.sort_by(|p, q| p.height.total_cmp(&q.height));
    Ok(Dendrogram { n, merges })
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

impl Dendrogram {
    /// Flat labels for `k` clusters, renumbered by descending cluster size
    /// (ties: the cluster holding the smaller point index first).
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", self.n)));
        }
        let mut parent: Vec<usize> = (0..self.n).collect();
        for m in &self.merges[..self.n - k] {
            let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
        let roots: Vec<usize> = (0..self.n).map(|i| find(&mut parent, i)).collect();
        Ok(canonical_labels(&roots))
    }
}

/// Relabel arbitrary cluster ids to `0..k`, largest cluster first; equal
/// sizes are ordered by first occurrence.
pub fn canonical_labels(ids: &[usize]) -> Vec<usize> {
    let mut first: Vec<(usize, usize, usize)> = Vec::new(); // (id, first index, size)
    let mut slot = std::collections::HashMap::new();
    for (i, &id) in ids.iter().enumerate() {
        let s = *slot.entry(id).or_insert_with(|| {
            first.push((id, i, 0));
            first.len() - 1
        });
        first[s].2 += 1;
    }
    let mut order: Vec<usize> = (0..first.len()).collect();
    order.sort_by(|&a, &b| first[b].2.cmp(&first[a].2).then(first[a].1.cmp(&first[b].1)));
    let mut relabel = vec![0usize; first.len()];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    ids.iter().map(|id| relabel[slot[id]]).collect()
}

/// Cluster the rows of `points` into `k` groups.
pub fn cluster_points(points: &DMatrix<f64>, k: usize, method: Linkage) -> Result<Vec<usize>> {
    if k == 0 || k > points.nrows() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {} points",
            points.nrows()
        )));
    }
    linkage(points, method)?.cut(k)
}

pub fn cluster(latent: &LatentPixelFeatures, k: usize, method: Linkage) -> Result<Vec<usize>> {
    cluster_points(&latent.projections, k, method)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels_grid: Vec<usize>,
    pub grid_shape: (usize, usize),
    pub labels_full: Vec<usize>,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub masks: Vec<BinaryMask>,
    pub k: usize,
    pub mode: Mode,
}

#[inline]
fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    ((2 * dst + 1) * src_len) / (2 * dst_len)
}

/// Reshape grid labels, upscale to the image with nearest-neighbour
/// sampling, and split into one mask per label.
pub fn labels_to_masks(
    labels: &[usize],
    grid_shape: (usize, usize),
    image_size: (usize, usize),
    mode: Mode,
) -> Result<SegmentationResult> {
    let (h, w) = grid_shape;
    let (ih, iw) = image_size;
    if labels.len() != h * w {
        return Err(Error::Shape(format!("{} labels for a {h}x{w} grid", labels.len())));
    }
    if ih == 0 || iw == 0 || h == 0 {
        return Err(Error::Shape(format!("image {ih}x{iw}, grid {h}x{w}")));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let xs: Vec<usize> = (0..iw).map(|x| nearest_source(x, iw, w)).collect();
    let mut labels_full = Vec::with_capacity(ih * iw);
    for y in 0..ih {
        let row = &labels[nearest_source(y, ih, h) * w..][..w];
        labels_full.extend(xs.iter().map(|&sx| row[sx]));
    }
    let mut masks = vec![BinaryMask::new(ih, iw); k];
    for (i, &l) in labels_full.iter().enumerate() {
        masks[l].set(i / iw, i % iw, true);
    }
    Ok(SegmentationResult {
        labels_grid: labels.to_vec(),
        grid_shape,
        labels_full,
        image_size,
        masks,
        k,
        mode,
    })
}

impl SegmentationResult {
    /// Palette-coloured full-resolution label image.
    pub fn label_image(&self) -> RgbImage {
        let (h, w) = self.image_size;
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let l = self.labels_full[y as usize * w + x as usize];
            // Index 0 is black in the palette; shift so every cluster is visible.
            image::Rgb(palette::color(((l % 255) + 1) as u8))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[&[f64]]) -> DMatrix<f64> {
        let d = rows[0].len();
        DMatrix::from_row_iterator(rows.len(), d, rows.iter().flat_map(|r| r.iter().copied()))
    }

    #[test]
    fn two_far_clouds() {
        let mut rows = Vec::new();
        for i in 0..10 {
            let j = (i as f64 * 0.37).sin() * 0.1;
            rows.push(vec![j, -j]);
            rows.push(vec![100.0 + j, 100.0 - j]);
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        for method in [Linkage::Ward, Linkage::Average, Linkage::Complete] {
            let labels = cluster_points(&pts(&refs), 2, method).unwrap();
            for i in 0..10 {
                assert_eq!(labels[2 * i], labels[0]);
                assert_eq!(labels[2 * i + 1], labels[1]);
            }
            assert_ne!(labels[0], labels[1]);
        }
    }

    #[test]
    fn n_equal_k_gives_singletons() {
        let p = pts(&[&[0.0], &[1.0], &[5.0]]);
        let mut labels = cluster_points(&p, 3, Linkage::Ward).unwrap();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2]);
        assert!(cluster_points(&p, 4, Linkage::Ward).is_err());
    }

    #[test]
    fn single_point() {
        let p = pts(&[&[1.0, 2.0]]);
        assert_eq!(cluster_points(&p, 1, Linkage::Ward).unwrap(), vec![0]);
    }

    #[test]
    fn ties_resolve_deterministically() {
        // Equally spaced points: every adjacent pair ties.
        let p = pts(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let a = linkage(&p, Linkage::Ward).unwrap();
        let b = linkage(&p, Linkage::Ward).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.merges[0], Merge { a: 0, b: 1, height: 1.0, size: 2 });
    }

    #[test]
    fn labels_sorted_by_size() {
        assert_eq!(canonical_labels(&[7, 3, 3, 9, 3, 7]), vec![1, 0, 0, 2, 0, 1]);
        assert_eq!(canonical_labels(&[5, 4]), vec![0, 1]);
    }

    #[test]
    fn upscale_2x2_to_4x4() {
        let seg = labels_to_masks(&[0, 1, 1, 0], (2, 2), (4, 4), Mode::Native).unwrap();
        let expect = [0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0];
        assert_eq!(seg.labels_full, expect);
        assert_eq!(seg.masks[0].count(), 8);
        assert_eq!(seg.k, 2);
    }

    #[test]
    fn same_size_upscale_is_identity() {
        let labels = vec![0, 2, 1, 1, 0, 2];
        let seg = labels_to_masks(&labels, (2, 3), (2, 3), Mode::Enlarged).unwrap();
        assert_eq!(seg.labels_full, labels);
        assert!(labels_to_masks(&labels, (2, 2), (2, 3), Mode::Enlarged).is_err());
    }

    #[test]
    fn masks_partition_the_image() {
        let labels: Vec<usize> = (0..15 * 20).map(|i| (i * 7 / 13) % 4).collect();
        let seg = labels_to_masks(&labels, (15, 20), (480, 640), Mode::Native).unwrap();
        for y in 0..480 {
            for x in 0..640 {
                assert_eq!(seg.masks.iter().filter(|m| m.get(y, x)).count(), 1);
            }
        }
        assert_eq!(seg.label_image().dimensions(), (640, 480));
    }
}
