use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Fill one polygon (flat `[x0, y0, x1, y1, …]`) with the even-odd rule,
/// sampling each pixel at its centre.
pub fn rasterize_polygon(mask: &mut BinaryMask, coords: &[f64]) {
    let pts: Vec<(f64, f64)> = coords.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    if pts.len() < 3 {
        return;
    }
    let (h, w) = mask.shape();
    let mut xs = Vec::new();
    for y in 0..h {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            if (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0) {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // Pixel x is inside when span[0] <= x + 0.5 < span[1].
            let start = (span[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((span[1] - 0.5).ceil().max(0.0) as usize).min(w);
            for x in start..end {
                mask.set(y, x, true);
            }
        }
    }
}

/// Union of several polygons.
pub fn rasterize_polygons(polygons: &[Vec<f64>], h: usize, w: usize) -> BinaryMask {
    let mut out = BinaryMask::new(h, w);
    for p in polygons {
        let mut part = BinaryMask::new(h, w);
        rasterize_polygon(&mut part, p);
        out = out.union(&part).expect("same shape");
    }
    out
}

/// Column-major run lengths, alternating background and foreground and
/// starting with background.
pub fn decode_uncompressed_rle(counts: &[u64], h: usize, w: usize) -> Result<BinaryMask> {
    let total: u64 = counts.iter().sum();
    if total != (h * w) as u64 {
        return Err(Error::Dataset(format!(
            "RLE counts sum to {total}, expected {h}x{w} = {}",
            h * w
        )));
    }
    let mut mask = BinaryMask::new(h, w);
    let mut pos = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        let run = run as usize;
        if i % 2 == 1 {
            for p in pos..pos + run {
                mask.set(p % h, p / h, true);
            }
        }
        pos += run;
    }
    Ok(mask)
}
