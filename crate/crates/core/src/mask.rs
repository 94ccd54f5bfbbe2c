//! Binary image masks with run-length encoding.
//!
//! Runs cover the mask in row-major order and alternate between zero and
//! one, always starting with a (possibly empty) zero-run.

use bitvec::vec::BitVec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: BitVec,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: BitVec::repeat(false, (width * height) as usize) }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for v in 0..height {
            for u in 0..width {
                if f(u, v) {
                    m.set(u, v, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> bool {
        self.bits[(v * self.width + u) as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, on: bool) {
        let i = (v * self.width + u) as usize;
        self.bits.set(i, on);
    }

    pub fn area(&self) -> u32 {
        self.bits.count_ones() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.bits.not_any()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        let mut bits = self.bits.clone();
        *bits.as_mut_bitslice() |= &other.bits;
        Mask { width: self.width, height: self.height, bits }
    }

    /// Iterates set pixels as `(u, v)` in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits.iter_ones().map(move |i| (i as u32 % w, i as u32 / w))
    }

    /// Inclusive pixel bounding box `(u0, v0, u1, v1)`.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut it = self.pixels();
        let (u, v) = it.next()?;
        let mut b = (u, v, u, v);
        for (u, v) in it {
            b.0 = b.0.min(u);
            b.1 = b.1.min(v);
            b.2 = b.2.max(u);
            b.3 = b.3.max(v);
        }
        Some(b)
    }

    /// Fraction of contour pixels lying on the image border.
    ///
    /// A contour pixel is a set pixel with a 4-neighbour that is unset or
    /// outside the image.
    pub fn border_contact(&self) -> f32 {
        let (w, h) = (self.width, self.height);
        let mut contour = 0u32;
        let mut on_border = 0u32;
        for (u, v) in self.pixels() {
            let border = u == 0 || v == 0 || u + 1 == w || v + 1 == h;
            let edge = border
                || !self.get(u - 1, v)
                || !self.get(u + 1, v)
                || !self.get(u, v - 1)
                || !self.get(u, v + 1);
            if edge {
                contour += 1;
                if border {
                    on_border += 1;
                }
            }
        }
        if contour == 0 {
            0.0
        } else {
            on_border as f32 / contour as f32
        }
    }

    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for b in self.bits.iter().by_vals() {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(width: u32, height: u32, runs: &[u32]) -> Result<Self> {
        let total = width as u64 * height as u64;
        let sum: u64 = runs.iter().map(|&r| r as u64).sum();
        if sum != total {
            return Err(Error::InvalidInput(format!(
                "mask runs cover {sum} pixels, expected {total}"
            )));
        }
        let mut bits = BitVec::with_capacity(total as usize);
        let mut on = false;
        for &r in runs {
            bits.resize(bits.len() + r as usize, on);
            on = !on;
        }
        Ok(Self { width, height, bits })
    }
}
