use crate::error::{shape_err, Result};

/// Label value for pixels excluded from supervision and evaluation.
pub const IGNORE_LABEL: u8 = 255;

/// Row-major boolean pixel grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PixelMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize) -> Self {
        PixelMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(shape_err!("mask {width}x{height} needs {} bits, got {}", width * height, bits.len()));
        }
        Ok(PixelMask { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..width * height).map(|i| f(i % width, i / width)).collect();
        PixelMask { width, height, bits }
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Set pixels as `(x, y)` in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn same_extent(&self, other: &PixelMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(shape_err!(
                "mask extents differ: {}x{} vs {}x{}",
                self.width,
                self.height,
                other.width,
                other.height
            ));
        }
        Ok(())
    }

    pub fn intersection(&self, other: &PixelMask) -> Result<PixelMask> {
        self.same_extent(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(PixelMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn union_with(&mut self, other: &PixelMask) -> Result<()> {
        self.same_extent(other)?;
        self.bits.iter_mut().zip(&other.bits).for_each(|(a, b)| *a |= *b);
        Ok(())
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &PixelMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }
}

/// Per-pixel class indices (row-major), [`IGNORE_LABEL`] marking unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(shape_err!("label map {width}x{height} needs {} labels, got {}", width * height, labels.len()));
        }
        Ok(LabelMap { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        LabelMap {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn class_mask(&self, class: u8) -> PixelMask {
        let bits = self.labels.iter().map(|&l| l == class).collect();
        PixelMask {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    /// Writes `label` on every set pixel of `mask`.
    pub fn paint(&mut self, mask: &PixelMask, label: u8) -> Result<()> {
        if mask.width() != self.width || mask.height() != self.height {
            return Err(shape_err!("paint: mask extent differs from label map"));
        }
        for (l, &b) in self.labels.iter_mut().zip(mask.bits()) {
            if b {
                *l = label;
            }
        }
        Ok(())
    }
}
