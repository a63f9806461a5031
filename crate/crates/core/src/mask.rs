//! Binary pixel masks (1 = manipulated).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.iter().any(|&v| v > 1) {
            return Err(Error::shape(
                "binary_mask",
                format!("{} values in {{0, 1}} expected for {height}×{width}", height * width),
            ));
        }
        Ok(BinaryMask { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_region(&self) -> bool {
        self.count() == 0
    }

    /// Nearest-neighbour resize sampling at pixel centres: output `(y, x)`
    /// takes input `(floor((y + 0.5) * H / h), floor((x + 0.5) * W / w))`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        let mut out = BinaryMask::zeros(height, width);
        for y in 0..height {
            let sy = (2 * y + 1) * self.height / (2 * height);
            for x in 0..width {
                let sx = (2 * x + 1) * self.width / (2 * width);
                out.data[y * width + x] = self.get(sy, sx);
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let mut out = self.clone();
        for y in 0..self.height {
            out.data[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }

    /// Targets as `f64` for loss ops.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_classes(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }
}
