//! Single-channel rasters: intensity images and class masks.

use crate::error::{Error, Result};

/// Row-major grid of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<V> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<V>,
}

/// Intensity image, nominally in `[0, 1]`.
pub type Image = Grid<f32>;

/// Per-pixel class labels; [`IGNORE_LABEL`] marks unlabeled pixels.
pub type Mask = Grid<u8>;

pub const IGNORE_LABEL: u8 = 255;

impl<V: Copy> Grid<V> {
    pub fn new(height: usize, width: usize, data: Vec<V>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Geometry(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: V) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> V {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: V) {
        self.data[row * self.width + col] = v;
    }

    pub fn hflip(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn vflip(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c))
    }

    /// Clockwise quarter turn: pixel `(r, c)` moves to `(c, H - 1 - r)`.
    pub fn rot90(&self) -> Self {
        let h = self.height;
        Self::from_fn(self.width, h, |r, c| self.get(h - 1 - c, r))
    }

    /// Copy of the window with top-left `(row, col)`; must lie inside.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::Geometry(format!(
                "window {height}x{width} at ({row}, {col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |r, c| self.get(row + r, col + c)))
    }

    /// Reflect-pads (mirror without repeating the edge) up to at least
    /// `height x width`, padding at the bottom/right.
    pub fn pad_reflect(&self, height: usize, width: usize) -> Self {
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        let (h, w) = (height.max(self.height), width.max(self.width));
        Self::from_fn(h, w, |r, c| self.get(reflect(r, self.height), reflect(c, self.width)))
    }
}

impl Image {
    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rot90_moves_origin_to_top_right() {
        let n = 5;
        let mut img = Image::filled(n, n, 0.0);
        img.set(0, 0, 1.0);
        let r = img.rot90();
        assert_eq!(r.get(0, n - 1), 1.0);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = Image::from_fn(4, 4, |r, c| (r * 4 + c) as f32);
        assert_eq!(img.rot90().rot90().rot90().rot90(), img);
        assert_eq!(img.hflip().hflip(), img);
    }

    #[test]
    fn reflect_padding_mirrors() {
        let img = Image::from_fn(1, 3, |_, c| c as f32);
        let p = img.pad_reflect(1, 6);
        assert_eq!(p.data, vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0]);
    }
}
