//! RGB frames and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width × 3` RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean intensity over all channels, in `[0, 1]`.
    pub fn mean_intensity(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / (self.data.len() as f64 * 255.0)
    }
}

/// Row-major `height × width` mask with values in `{0, 255}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// Tight pixel bounds of a mask's support, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBounds {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![255; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}×{height} mask needs {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::Validation(format!("mask value {v} is not 0 or 255")));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = if on { 255 } else { 0 };
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Coordinates `(x, y)` of every set pixel in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn bounds(&self) -> Option<PixelBounds> {
        let mut b: Option<PixelBounds> = None;
        for (x, y) in self.pixels() {
            b = Some(match b {
                None => PixelBounds { x0: x, y0: y, x1: x, y1: y },
                Some(p) => PixelBounds {
                    x0: p.x0.min(x),
                    y0: p.y0.min(y),
                    x1: p.x1.max(x),
                    y1: p.y1.max(y),
                },
            });
        }
        b
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let (a, b) = (a != 0, b != 0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Axis-aligned box in normalized image coordinates, `x` right and `y`
/// down, both in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl NormBox {
    /// The box covering whole pixels `x0..=x1`, `y0..=y1`.
    pub fn from_bounds(b: PixelBounds, width: usize, height: usize) -> Self {
        Self {
            x1: b.x0 as f32 / width as f32,
            y1: b.y0 as f32 / height as f32,
            x2: (b.x1 + 1) as f32 / width as f32,
            y2: (b.y1 + 1) as f32 / height as f32,
        }
    }

    pub fn area(&self) -> f64 {
        ((self.x2 - self.x1).max(0.0) as f64) * ((self.y2 - self.y1).max(0.0) as f64)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x1 as f64..=self.x2 as f64).contains(&x) && (self.y1 as f64..=self.y2 as f64).contains(&y)
    }

    pub fn intersects(&self, other: &NormBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }

    /// The box scaled by `factor` about its center and clamped to the unit
    /// square.
    pub fn scaled(&self, factor: f64) -> NormBox {
        let (cx, cy) = ((self.x1 as f64 + self.x2 as f64) / 2.0, (self.y1 as f64 + self.y2 as f64) / 2.0);
        let (hw, hh) = ((self.x2 - self.x1) as f64 * factor / 2.0, (self.y2 - self.y1) as f64 * factor / 2.0);
        NormBox {
            x1: (cx - hw).clamp(0.0, 1.0) as f32,
            y1: (cy - hh).clamp(0.0, 1.0) as f32,
            x2: (cx + hw).clamp(0.0, 1.0) as f32,
            y2: (cy + hh).clamp(0.0, 1.0) as f32,
        }
    }

    /// Smallest pixel rectangle (inclusive) whose cells meet the box.
    pub fn pixel_span(&self, width: usize, height: usize) -> PixelBounds {
        // The slack absorbs f32 rounding of coordinates built from pixel edges.
        const SLACK: f64 = 1e-4;
        let lo = |v: f32, n: usize| ((v as f64 * n as f64 + SLACK).floor().max(0.0) as usize).min(n - 1);
        let hi = |v: f32, n: usize| (((v as f64 * n as f64 - SLACK).ceil().max(1.0) as usize) - 1).min(n - 1);
        let (fx, fy) = (|v| lo(v, width), |v| lo(v, height));
        let (cx, cy) = (|v| hi(v, width), |v| hi(v, height));
        PixelBounds {
            x0: fx(self.x1),
            y0: fy(self.y1),
            x1: cx(self.x2).max(fx(self.x1)),
            y1: cy(self.y2).max(fy(self.y1)),
        }
    }

    /// Fraction of the mask's pixel centers that fall inside the box.
    pub fn coverage(&self, mask: &Mask) -> f64 {
        let pixels = mask.pixels();
        if pixels.is_empty() {
            return 0.0;
        }
        let (w, h) = (mask.width() as f64, mask.height() as f64);
        let inside = pixels
            .iter()
            .filter(|&&(x, y)| self.contains((x as f64 + 0.5) / w, (y as f64 + 0.5) / h))
            .count();
        inside as f64 / pixels.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_non_binary_values() {
        assert!(Mask::from_raw(2, 1, vec![0, 7]).is_err());
        assert!(Mask::from_raw(2, 1, vec![0, 255]).is_ok());
    }

    #[test]
    fn bounds_and_iou() {
        let a = Mask::from_fn(4, 4, |x, y| x < 2 && y < 2);
        assert_eq!(a.bounds(), Some(PixelBounds { x0: 0, y0: 0, x1: 1, y1: 1 }));
        let b = Mask::from_fn(4, 4, |x, y| x < 2 && y < 1);
        assert!((a.iou(&b) - 0.5).abs() < 1e-12);
        assert_eq!(Mask::empty(3, 3).bounds(), None);
    }

    #[test]
    fn box_from_bounds_and_coverage() {
        let m = Mask::from_fn(10, 10, |x, y| (2..4).contains(&x) && (5..9).contains(&y));
        let b = NormBox::from_bounds(m.bounds().unwrap(), 10, 10);
        assert_eq!(b, NormBox { x1: 0.2, y1: 0.5, x2: 0.4, y2: 0.9 });
        assert_eq!(b.coverage(&m), 1.0);
        assert_eq!(b.pixel_span(10, 10), m.bounds().unwrap());
        let left = NormBox { x1: 0.0, y1: 0.0, x2: 0.3, y2: 1.0 };
        assert_eq!(left.coverage(&m), 0.5);
    }
}
