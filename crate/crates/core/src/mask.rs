//! Row-major boolean masks.

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
        BinaryMask { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        BinaryMask { height, width, data }
    }

    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    fn check_same(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same(other, "mask intersection")?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count())
    }

    /// Nearest-neighbour resize; output pixel `o` samples `floor(o * src / dst)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| {
            self.get(y * self.height / height, x * self.width / width)
        })
    }

    /// Downsamples by an integer factor; a cell is set when more than half of
    /// its pixels are.
    pub fn downsample_area(&self, factor: usize) -> Result<BinaryMask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::shape(
                "downsample_area",
                format!("{}x{} not divisible by {factor}", self.height, self.width),
            ));
        }
        let half = factor * factor;
        Ok(BinaryMask::from_fn(self.height / factor, self.width / factor, |y, x| {
            let mut n = 0;
            for dy in 0..factor {
                let row = (y * factor + dy) * self.width + x * factor;
                n += self.data[row..row + factor].iter().filter(|&&v| v).count();
            }
            2 * n > half
        }))
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    /// Run-length encoding `[start, len, ...]` of the set pixels, row-major.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.data.len() {
            if self.data[i] {
                let start = i;
                while i < self.data.len() && self.data[i] {
                    i += 1;
                }
                out.extend([start, i - start]);
            } else {
                i += 1;
            }
        }
        out
    }

    pub fn from_rle(height: usize, width: usize, rle: &[usize]) -> Result<BinaryMask> {
        if rle.len() % 2 != 0 {
            return Err(Error::shape("rle", "odd number of run-length entries"));
        }
        let mut m = BinaryMask::empty(height, width);
        for run in rle.chunks(2) {
            let (start, len) = (run[0], run[1]);
            if start + len > m.data.len() {
                return Err(Error::shape("rle", format!("run {start}+{len} exceeds {height}x{width}")));
            }
            m.data[start..start + len].iter_mut().for_each(|v| *v = true);
        }
        Ok(m)
    }
}
