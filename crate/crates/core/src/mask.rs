//! Dense binary masks shared by the segmenter, localizer, and evaluator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary mask.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, {} set)",
            self.height,
            self.width,
            self.count()
        )
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn filled(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask data has {} cells, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "masks differ in shape: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(BinaryMask { data, ..*self })
    }

    /// Cells set in `self` and not in `other`.
    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && !b)
            .collect();
        Ok(BinaryMask { data, ..*self })
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Inclusive `(x0, y0, x1, y1)` bounds of the set cells.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bounds = Some(match bounds {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bounds
    }

    pub fn to_gray_image(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_of_empty_is_none() {
        assert_eq!(BinaryMask::new(3, 4).bbox(), None);
    }

    #[test]
    fn bbox_is_inclusive() {
        let mut m = BinaryMask::new(5, 5);
        m.set(1, 2, true);
        m.set(3, 4, true);
        assert_eq!(m.bbox(), Some((2, 1, 4, 3)));
    }

    #[test]
    fn set_algebra_rejects_shape_mismatch() {
        let a = BinaryMask::new(2, 2);
        let b = BinaryMask::new(2, 3);
        assert!(a.union(&b).is_err());
        assert!(a.difference(&b).is_err());
        assert!(!a.is_subset_of(&b));
    }
}
