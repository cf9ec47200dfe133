//! Dense pixel containers shared by every stage of the pipeline.
//!
//! [`PixelGrid`] stores `height × width × depth` doubles in row-major
//! `(row, col, channel)` order. It carries images, feature maps, logit maps,
//! energy maps and score maps. [`LabelMap`] carries per-pixel class labels
//! using 1-based inlier classes `1..=Y`, the anomaly class `Y + 1` and
//! [`IGNORE`].

use crate::error::{PebalError, Result};

/// Label value for pixels that contribute to no loss or metric.
pub const IGNORE: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl PixelGrid {
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self::filled(height, width, depth, 0.0)
    }

    pub fn filled(height: usize, width: usize, depth: usize, value: f64) -> Self {
        assert!(depth >= 1, "grid depth must be at least 1");
        Self {
            height,
            width,
            depth,
            data: vec![value; height * width * depth],
        }
    }

    pub fn from_vec(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if depth == 0 {
            return Err(PebalError::arg("grid depth must be at least 1"));
        }
        if data.len() != height * width * depth {
            return Err(PebalError::arg(format!(
                "grid data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                depth
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(PebalError::arg(format!(
                "non-finite grid value {} at flat index {}",
                data[bad], bad
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    /// Builds a grid by evaluating `f(row, col, channel)` for every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        depth: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(depth >= 1, "grid depth must be at least 1");
        let mut data = Vec::with_capacity(height * width * depth);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..depth {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            depth,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &PixelGrid) -> bool {
        self.height == other.height && self.width == other.width && self.depth == other.depth
    }

    pub fn same_plane(&self, other: &PixelGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        debug_assert!(row < self.height && col < self.width && ch < self.depth);
        (row * self.width + col) * self.depth + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Channel vector of the pixel with flat index `pixel` (`row * width + col`).
    #[inline]
    pub fn pixel(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.depth..(pixel + 1) * self.depth]
    }

    #[inline]
    pub fn pixel_mut(&mut self, pixel: usize) -> &mut [f64] {
        &mut self.data[pixel * self.depth..(pixel + 1) * self.depth]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.depth)
    }

    pub fn pixels_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.data.chunks_exact_mut(self.depth)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> PixelGrid {
        PixelGrid {
            height: self.height,
            width: self.width,
            depth: self.depth,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Element-wise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PixelGrid, scale: f64) {
        assert!(self.same_shape(other), "grid shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_inlier_classes: u8,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        num_inlier_classes: u8,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if !(2..IGNORE - 1).contains(&num_inlier_classes) {
            return Err(PebalError::arg(format!(
                "number of inlier classes must be in 2..={}, got {}",
                IGNORE - 2,
                num_inlier_classes
            )));
        }
        if labels.len() != height * width {
            return Err(PebalError::arg(format!(
                "label count {} does not match {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        let anomaly = num_inlier_classes + 1;
        if let Some(bad) = labels
            .iter()
            .position(|&l| l != IGNORE && (l == 0 || l > anomaly))
        {
            return Err(PebalError::arg(format!(
                "label {} at pixel {} outside 1..={} and not IGNORE",
                labels[bad], bad, anomaly
            )));
        }
        Ok(Self {
            height,
            width,
            num_inlier_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_inlier_classes: u8, label: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            num_inlier_classes,
            vec![label; height * width],
        )
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// `Y`, the number of inlier classes.
    #[inline]
    pub fn num_inlier_classes(&self) -> usize {
        self.num_inlier_classes as usize
    }

    /// The reserved anomaly label `Y + 1`.
    #[inline]
    pub fn anomaly_label(&self) -> u8 {
        self.num_inlier_classes + 1
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Writes a label; panics on a value the map could not hold.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        assert!(
            label == IGNORE || (1..=self.anomaly_label()).contains(&label),
            "label {label} out of range"
        );
        self.labels[row * self.width + col] = label;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn is_inlier(&self, label: u8) -> bool {
        label != IGNORE && label <= self.num_inlier_classes
    }

    #[inline]
    pub fn is_anomaly(&self, label: u8) -> bool {
        label == self.anomaly_label()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn anomaly_count(&self) -> usize {
        self.count(self.anomaly_label())
    }

    pub fn same_plane(&self, grid: &PixelGrid) -> bool {
        self.height == grid.height() && self.width == grid.width()
    }
}

/// Boolean per-pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(PebalError::arg(format!(
                "mask length {} does not match {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// An image with its per-pixel ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: PixelGrid,
    pub labels: LabelMap,
}

impl LabeledSample {
    pub fn new(image: PixelGrid, labels: LabelMap) -> Result<Self> {
        if !labels.same_plane(&image) {
            return Err(PebalError::arg(format!(
                "image {}x{} and labels {}x{} differ in size",
                image.height(),
                image.width(),
                labels.height(),
                labels.width()
            )));
        }
        Ok(Self { image, labels })
    }

    pub fn anomaly_fraction(&self) -> f64 {
        self.labels.anomaly_count() as f64 / self.labels.num_pixels() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_length_and_nan() {
        assert!(PixelGrid::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(PixelGrid::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(PixelGrid::from_vec(1, 2, 0, vec![]).is_err());
    }

    #[test]
    fn row_major_channel_order() {
        let g = PixelGrid::from_fn(2, 3, 2, |r, c, ch| (r * 100 + c * 10 + ch) as f64);
        assert_eq!(g.as_slice()[..4], [0.0, 1.0, 10.0, 11.0]);
        assert_eq!(g.get(1, 2, 1), 121.0);
        assert_eq!(g.pixel(5), &[120.0, 121.0]);
    }

    #[test]
    fn label_map_validation() {
        assert!(LabelMap::new(1, 3, 4, vec![1, 5, IGNORE]).is_ok());
        assert!(LabelMap::new(1, 1, 4, vec![6]).is_err());
        assert!(LabelMap::new(1, 1, 4, vec![0]).is_err());
        assert!(LabelMap::new(1, 1, 1, vec![1]).is_err());
        let m = LabelMap::new(1, 3, 4, vec![1, 5, IGNORE]).unwrap();
        assert_eq!(m.anomaly_label(), 5);
        assert!(m.is_inlier(4) && !m.is_inlier(5) && !m.is_inlier(IGNORE));
        assert_eq!(m.anomaly_count(), 1);
    }
}
