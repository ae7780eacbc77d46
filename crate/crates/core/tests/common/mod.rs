#![allow(dead_code)]

use std::path::{Path, PathBuf};

use segvoc::config::PipelineConfig;
use segvoc::runtime::ImageTensor;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn models() -> PathBuf {
    fixtures().join("models")
}

pub fn config(workers: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.models.dir = Some(models());
    cfg.workers = workers;
    cfg
}

/// `u32 LE header length | JSON {shape, dtype} | f32 LE data`.
pub struct Golden {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn read_golden(name: &str) -> Golden {
    let bytes = std::fs::read(fixtures().join("golden").join(name)).unwrap();
    let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + n]).unwrap();
    assert_eq!(header["dtype"], "f32le");
    let shape: Vec<usize> = header["shape"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    let values: Vec<f32> = bytes[4 + n..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(values.len(), shape.iter().product::<usize>());
    Golden { shape, values }
}

/// The smooth input the goldens were produced from, channels-last.
pub fn pattern_input(h: usize, w: usize) -> ImageTensor {
    let mut values = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let cf = c as f64;
                let v = (0.05 * x as f64 * (cf + 1.0)).sin() + (0.07 * y as f64 * (cf + 1.0)).cos() + 0.1 * cf;
                values.push(v as f32);
            }
        }
    }
    ImageTensor::new(h, w, 3, values).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Best total weight over all injections of the smaller side into the larger.
pub fn brute_force_assignment(w: &[Vec<f64>]) -> f64 {
    let rows = w.len();
    let cols = if rows == 0 { 0 } else { w[0].len() };
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let (small, large, get): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if rows <= cols {
        (rows, cols, Box::new(|s, l| w[s][l]))
    } else {
        (cols, rows, Box::new(|s, l| w[l][s]))
    };
    fn go(s: usize, small: usize, used: &mut Vec<bool>, get: &dyn Fn(usize, usize) -> f64) -> f64 {
        if s == small {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for l in 0..used.len() {
            if !used[l] {
                used[l] = true;
                best = best.max(get(s, l) + go(s + 1, small, used, get));
                used[l] = false;
            }
        }
        best
    }
    go(0, small, &mut vec![false; large], &*get)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p][q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig
}

#[derive(Clone, Copy, Debug)]
pub enum NaiveLinkage {
    Ward,
    Average,
    Complete,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cluster_distance(points: &[Vec<f64>], a: &[usize], b: &[usize], method: NaiveLinkage) -> f64 {
    match method {
        NaiveLinkage::Ward => {
            let centroid = |c: &[usize]| -> Vec<f64> {
                let d = points[0].len();
                (0..d)
                    .map(|j| c.iter().map(|&i| points[i][j]).sum::<f64>() / c.len() as f64)
                    .collect()
            };
            let (na, nb) = (a.len() as f64, b.len() as f64);
            (2.0 * na * nb / (na + nb)).sqrt() * euclid(&centroid(a), &centroid(b))
        }
        NaiveLinkage::Average => {
            let total: f64 = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).map(|(i, j)| euclid(&points[i], &points[j])).sum();
            total / (a.len() * b.len()) as f64
        }
        NaiveLinkage::Complete => a
            .iter()
            .flat_map(|&i| b.iter().map(move |&j| (i, j)))
            .map(|(i, j)| euclid(&points[i], &points[j]))
            .fold(0.0, f64::max),
    }
}

/// Step-by-step agglomeration from the definition of each linkage. Returns
/// the merge heights and, for every `k` from `n` down to 1, the partition
/// as sorted groups of point indices.
pub fn naive_agglomerate(points: &[Vec<f64>], method: NaiveLinkage) -> (Vec<f64>, Vec<Vec<Vec<usize>>>) {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let snapshot = |cs: &Vec<Vec<usize>>| {
        let mut s: Vec<Vec<usize>> = cs.clone();
        for c in &mut s {
            c.sort();
        }
        s.sort();
        s
    };
    let mut heights = Vec::new();
    let mut partitions = vec![snapshot(&clusters)];
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = cluster_distance(points, &clusters[i], &clusters[j], method);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (h, i, j) = best;
        let merged = clusters.remove(j);
        clusters[i].extend(merged);
        heights.push(h);
        partitions.push(snapshot(&clusters));
    }
    (heights, partitions)
}

/// Groups of point indices implied by a label vector, in canonical order.
pub fn groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut g = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        g[l].push(i);
    }
    g.sort();
    g
}

/// Best split of sorted 1-D values into three contiguous runs under the
/// within-cluster sum of squares.
pub fn best_contiguous_3_partition(sorted: &[f64]) -> (usize, usize) {
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
    };
    let n = sorted.len();
    let mut best = (f64::INFINITY, 0, 0);
    for i in 1..n - 1 {
        for j in i + 1..n {
            let cost = sse(&sorted[..i]) + sse(&sorted[i..j]) + sse(&sorted[j..]);
            if cost < best.0 {
                best = (cost, i, j);
            }
        }
    }
    (best.1, best.2)
}
