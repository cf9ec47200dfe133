use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PebalError, Result};
use crate::grid::PixelGrid;
use crate::numeric::reflect_index;
use crate::parallel::par_map;

/// Construction parameters for [`FeatureExtractor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractorConfig {
    pub channels: usize,
    pub num_filters: usize,
    pub kernel_size: usize,
    /// Standard deviation of each filter's colour projection. Larger values
    /// give features that vary faster with colour.
    pub color_frequency: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            num_filters: 32,
            kernel_size: 5,
            color_frequency: 6.0,
            seed: 7,
        }
    }
}

/// Frozen bank of random convolution filters followed by `cos` and a
/// per-channel standardization.
///
/// Each filter is a normalized spatial Gaussian blob times a random colour
/// direction, so a feature is `cos(g · local_mean_colour + b)`: a random
/// Fourier feature of the locally averaged colour. A linear head on top of
/// these behaves like a kernel machine in colour space, which keeps logits
/// near their bias far away from the training colours.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    channels: usize,
    num_filters: usize,
    kernel_size: usize,
    seed: u64,
    /// `[filter][dr][dc][channel]`
    weights: Vec<f64>,
    bias: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl FeatureExtractor {
    /// Draws the filter bank. Standardization statistics are taken from
    /// `calibration` images when given, otherwise from the moments of `cos`
    /// under a uniform phase (mean 0, variance 1/2).
    pub fn new(config: &ExtractorConfig, calibration: &[PixelGrid]) -> Result<Self> {
        if config.channels == 0 || config.num_filters == 0 {
            return Err(PebalError::arg(
                "extractor needs at least one channel and filter",
            ));
        }
        if config.kernel_size == 0 || config.kernel_size.is_multiple_of(2) {
            return Err(PebalError::arg(format!(
                "filter size must be odd, got {}",
                config.kernel_size
            )));
        }
        if !(config.color_frequency > 0.0 && config.color_frequency.is_finite()) {
            return Err(PebalError::arg("color_frequency must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let color = Normal::new(0.0, config.color_frequency).expect("positive sigma");
        let (k, c) = (config.kernel_size, config.channels);
        let half = (k / 2) as f64;
        let mut weights = Vec::with_capacity(config.num_filters * k * k * c);
        let mut bias = Vec::with_capacity(config.num_filters);
        for _ in 0..config.num_filters {
            let direction: Vec<f64> = (0..c).map(|_| color.sample(&mut rng)).collect();
            let cy = rng.random_range(-0.5..=0.5) * half;
            let cx = rng.random_range(-0.5..=0.5) * half;
            let width: f64 = rng.random_range(0.6..1.8);
            let mut profile = Vec::with_capacity(k * k);
            for dr in 0..k {
                for dc in 0..k {
                    let (y, x) = (dr as f64 - half - cy, dc as f64 - half - cx);
                    profile.push((-(y * y + x * x) / (2.0 * width * width)).exp());
                }
            }
            let total: f64 = profile.iter().sum();
            for p in &profile {
                for d in &direction {
                    weights.push(p / total * d);
                }
            }
            bias.push(rng.random_range(0.0..2.0 * PI));
        }
        let mut extractor = Self {
            channels: c,
            num_filters: config.num_filters,
            kernel_size: k,
            seed: config.seed,
            weights,
            bias,
            mean: vec![0.0; config.num_filters],
            std: vec![0.5f64.sqrt(); config.num_filters],
        };
        if !calibration.is_empty() {
            extractor.calibrate(calibration)?;
        }
        Ok(extractor)
    }

    /// Rebuilds an extractor from stored parameters (checkpoint loading).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        channels: usize,
        num_filters: usize,
        kernel_size: usize,
        seed: u64,
        weights: Vec<f64>,
        bias: Vec<f64>,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2)
            || weights.len() != num_filters * kernel_size * kernel_size * channels
            || bias.len() != num_filters
            || mean.len() != num_filters
            || std.len() != num_filters
        {
            return Err(PebalError::arg("inconsistent extractor parameter sizes"));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(PebalError::arg("standardization scales must be positive"));
        }
        let all = weights.iter().chain(&bias).chain(&mean).chain(&std);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(PebalError::arg("extractor parameters must be finite"));
        }
        Ok(Self {
            channels,
            num_filters,
            kernel_size,
            seed,
            weights,
            bias,
            mean,
            std,
        })
    }

    fn calibrate(&mut self, images: &[PixelGrid]) -> Result<()> {
        let raw = par_map(images, |img| self.raw_features(img));
        let k = self.num_filters;
        let mut sum = vec![0.0; k];
        let mut sq = vec![0.0; k];
        let mut n = 0usize;
        for grid in &raw {
            let grid = grid.as_ref().map_err(|e| PebalError::arg(e.to_string()))?;
            for px in grid.pixels() {
                for (f, &v) in px.iter().enumerate() {
                    sum[f] += v;
                    sq[f] += v * v;
                }
            }
            n += grid.num_pixels();
        }
        for f in 0..k {
            let mean = sum[f] / n as f64;
            let var = (sq[f] / n as f64 - mean * mean).max(0.0);
            self.mean[f] = mean;
            self.std[f] = var.sqrt().max(1e-3);
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_filters(&self) -> usize {
        self.num_filters
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn raw_features(&self, image: &PixelGrid) -> Result<PixelGrid> {
        if image.depth() != self.channels {
            return Err(PebalError::arg(format!(
                "image depth {} does not match extractor channels {}",
                image.depth(),
                self.channels
            )));
        }
        let (h, w, c, k) = (
            image.height(),
            image.width(),
            self.channels,
            self.kernel_size,
        );
        let half = (k / 2) as isize;
        let taps = k * k * c;
        let mut out = PixelGrid::zeros(h, w, self.num_filters);
        let mut patch = vec![0.0; taps];
        for r in 0..h {
            for col in 0..w {
                let mut t = 0;
                for dr in 0..k {
                    let rr = reflect_index(r as isize + dr as isize - half, h);
                    for dc in 0..k {
                        let cc = reflect_index(col as isize + dc as isize - half, w);
                        let px = image.pixel(rr * w + cc);
                        patch[t..t + c].copy_from_slice(px);
                        t += c;
                    }
                }
                let dst = out.pixel_mut(r * w + col);
                for (f, (o, filt)) in dst
                    .iter_mut()
                    .zip(self.weights.chunks_exact(taps))
                    .enumerate()
                {
                    let mut acc = self.bias[f];
                    for (a, b) in filt.iter().zip(&patch) {
                        acc += a * b;
                    }
                    *o = acc.cos();
                }
            }
        }
        Ok(out)
    }

    /// Standardized feature map, same spatial size as `image`, depth `K`.
    pub fn extract(&self, image: &PixelGrid) -> Result<PixelGrid> {
        let mut out = self.raw_features(image)?;
        for px in out.pixels_mut() {
            for ((v, m), s) in px.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}
