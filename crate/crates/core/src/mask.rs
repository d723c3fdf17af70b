use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary segmentation on a square-or-rectangular pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

/// Run-length encoding of a [`BinaryMask`]: each run is `[start, length]`
/// over the flattened row-major index of set pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<[usize; 2]>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        BinaryMask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    /// Number of 8-connected components of set pixels.
    pub fn components8(&self) -> usize {
        let mut seen = vec![false; self.bits.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(idx) = stack.pop() {
                let (r, c) = ((idx / self.width) as isize, (idx % self.width) as isize);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0
                            || nc < 0
                            || nr >= self.height as isize
                            || nc >= self.width as isize
                        {
                            continue;
                        }
                        let n = nr as usize * self.width + nc as usize;
                        if self.bits[n] && !seen[n] {
                            seen[n] = true;
                            stack.push(n);
                        }
                    }
                }
            }
        }
        count
    }

    pub fn to_rle(&self) -> RleMask {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.bits.len() {
            if self.bits[i] {
                let start = i;
                while i < self.bits.len() && self.bits[i] {
                    i += 1;
                }
                runs.push([start, i - start]);
            } else {
                i += 1;
            }
        }
        RleMask {
            width: self.width,
            height: self.height,
            runs,
        }
    }
}

impl RleMask {
    /// Expands the runs, rejecting any run that leaves the grid.
    pub fn decode(&self) -> Result<BinaryMask> {
        let total = self
            .width
            .checked_mul(self.height)
            .ok_or_else(|| Error::OutOfRange("mask dimensions overflow".into()))?;
        let mut bits = vec![false; total];
        for &[start, len] in &self.runs {
            let end = start
                .checked_add(len)
                .filter(|&end| end <= total)
                .ok_or_else(|| {
                    Error::OutOfRange(format!(
                        "run [{start}, {len}] exceeds {}x{} grid",
                        self.width, self.height
                    ))
                })?;
            bits[start..end].iter_mut().for_each(|b| *b = true);
        }
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }
}
