use serde::{Deserialize, Serialize};

use crate::geometry::BoxRegion;

/// Image-sized binary mask, row-major.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

/// COCO uncompressed run-length encoding: column-major runs, starting with
/// the number of background pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Tight box in pixel-edge coordinates (`x1` is one past the last
    /// column), or `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BoxRegion> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BoxRegion::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32))
    }

    pub fn hflip(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = self.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            size: [self.height, self.width],
            counts,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self, String> {
        let [h, w] = rle.size;
        let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
        if total != (w * h) as u64 {
            return Err(format!("RLE covers {total} pixels, expected {}", w * h));
        }
        let mut mask = Self::new(w, h);
        let mut pos = 0usize;
        let mut value = false;
        for &c in &rle.counts {
            for p in pos..pos + c as usize {
                if value {
                    let (x, y) = (p / h, p % h);
                    mask.set(x, y, true);
                }
            }
            pos += c as usize;
            value = !value;
        }
        Ok(mask)
    }

    /// Max-pool to a `cells x cells` grid (each cell covers `width / cells`
    /// pixels).
    pub fn max_pool(&self, cells: usize) -> Vec<bool> {
        let sx = self.width / cells;
        let sy = self.height / cells;
        let mut out = vec![false; cells * cells];
        for y in 0..cells * sy {
            for x in 0..cells * sx {
                if self.get(x, y) {
                    out[(y / sy) * cells + x / sx] = true;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_column_major_convention() {
        // 2x2 mask with only (x=1, y=0) set: column-major order is
        // (0,0) (0,1) (1,0) (1,1) -> runs [2 zeros, 1 one, 1 zero].
        let mut m = BinaryMask::new(2, 2);
        m.set(1, 0, true);
        assert_eq!(m.to_rle().counts, vec![2, 1, 1]);
        let mut first = BinaryMask::new(2, 2);
        first.set(0, 0, true);
        assert_eq!(first.to_rle().counts, vec![0, 1, 3]);
    }

    #[test]
    fn tight_box_of_empty_is_none() {
        assert_eq!(BinaryMask::new(4, 4).tight_box(), None);
    }

    proptest! {
        #[test]
        fn rle_round_trip(bits in proptest::collection::vec(any::<bool>(), 35)) {
            let m = BinaryMask { width: 7, height: 5, data: bits };
            prop_assert_eq!(BinaryMask::from_rle(&m.to_rle()).unwrap(), m);
        }
    }
}
