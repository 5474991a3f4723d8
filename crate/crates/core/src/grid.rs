//! Binary masks over image grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {} values does not fit {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.same_dims(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    /// Erosion with a 3×3 cross, repeated `iterations` times; outside the grid counts as background.
    pub fn erode_cross(&self, iterations: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut cur = self.clone();
        for _ in 0..iterations {
            let mut next = Self::empty(h, w);
            for r in 0..h {
                for c in 0..w {
                    next.data[r * w + c] = cur.get(r, c)
                        && r > 0
                        && c > 0
                        && r + 1 < h
                        && c + 1 < w
                        && cur.get(r - 1, c)
                        && cur.get(r + 1, c)
                        && cur.get(r, c - 1)
                        && cur.get(r, c + 1);
                }
            }
            cur = next;
        }
        cur
    }

    /// Bounding box `(min_row, min_col, max_row, max_col)` of set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bb
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_erosion_removes_boundary_ring() {
        let mut m = BinaryMask::empty(5, 5);
        for r in 1..4 {
            for c in 1..4 {
                m.set(r, c, true);
            }
        }
        let e = m.erode_cross(1);
        assert_eq!(e.count(), 1);
        assert!(e.get(2, 2));
        assert!(e.is_subset_of(&m));
    }

    #[test]
    fn full_grid_erodes_at_image_border() {
        let m = BinaryMask {
            height: 4,
            width: 4,
            data: vec![true; 16],
        };
        assert_eq!(m.erode_cross(1).count(), 4);
    }
}
