use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PebalError, Result};
use crate::grid::PixelGrid;

/// Per-pixel affine classifier (a 1×1 convolution) from `K` features to
/// `out_dim` logits. Parameters are stored flat: the `K × out_dim` weight
/// matrix row-major, followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    in_dim: usize,
    out_dim: usize,
    params: Vec<f64>,
}

/// Gradient of a scalar loss w.r.t. head parameters, same layout as the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub in_dim: usize,
    pub out_dim: usize,
    pub params: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            params: vec![0.0; in_dim * out_dim + out_dim],
        }
    }

    pub fn weight(&self, k: usize, y: usize) -> f64 {
        self.params[k * self.out_dim + y]
    }

    pub fn bias(&self, y: usize) -> f64 {
        self.params[self.in_dim * self.out_dim + y]
    }

    pub fn add_assign(&mut self, other: &HeadGrad) {
        assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.params.iter_mut().for_each(|v| *v *= s);
    }
}

impl ClassificationHead {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            params: vec![0.0; in_dim * out_dim + out_dim],
        }
    }

    /// Weights drawn from `N(0, std²)`, zero bias.
    pub fn random(in_dim: usize, out_dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("non-negative std");
        let mut head = Self::zeros(in_dim, out_dim);
        for w in &mut head.params[..in_dim * out_dim] {
            *w = normal.sample(&mut rng);
        }
        head
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(PebalError::arg(format!(
                "head parameter sizes {}/{} do not match {}x{}",
                weights.len(),
                bias.len(),
                in_dim,
                out_dim
            )));
        }
        let mut params = weights;
        params.extend(bias);
        let head = Self {
            in_dim,
            out_dim,
            params,
        };
        head.check_finite()?;
        Ok(head)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self, k: usize, y: usize) -> f64 {
        self.params[k * self.out_dim + y]
    }

    pub fn set_weight(&mut self, k: usize, y: usize, v: f64) {
        self.params[k * self.out_dim + y] = v;
    }

    pub fn bias(&self, y: usize) -> f64 {
        self.params[self.in_dim * self.out_dim + y]
    }

    pub fn set_bias(&mut self, y: usize, v: f64) {
        self.params[self.in_dim * self.out_dim + y] = v;
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.in_dim * self.out_dim]
    }

    pub fn biases(&self) -> &[f64] {
        &self.params[self.in_dim * self.out_dim..]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(PebalError::Numerical(
                "head parameters are not finite".into(),
            ))
        }
    }

    pub fn forward(&self, features: &PixelGrid) -> Result<PixelGrid> {
        if features.depth() != self.in_dim {
            return Err(PebalError::arg(format!(
                "feature depth {} does not match head input {}",
                features.depth(),
                self.in_dim
            )));
        }
        let bias = self.biases();
        let weights = self.weights();
        let mut out = PixelGrid::zeros(features.height(), features.width(), self.out_dim);
        for (f, z) in features.pixels().zip(out.pixels_mut()) {
            z.copy_from_slice(bias);
            for (fk, row) in f.iter().zip(weights.chunks_exact(self.out_dim)) {
                for (zy, w) in z.iter_mut().zip(row) {
                    *zy += fk * w;
                }
            }
        }
        Ok(out)
    }

    /// `dW[k][y] = Σ_ω f[ω][k] g[ω][y]`, `db[y] = Σ_ω g[ω][y]`.
    pub fn backward(&self, features: &PixelGrid, grad_logits: &PixelGrid) -> Result<HeadGrad> {
        if features.depth() != self.in_dim
            || grad_logits.depth() != self.out_dim
            || !features.same_plane(grad_logits)
        {
            return Err(PebalError::arg(
                "feature / logit-gradient shapes do not match the head",
            ));
        }
        let mut grad = HeadGrad::zeros(self.in_dim, self.out_dim);
        let (w_part, b_part) = grad.params.split_at_mut(self.in_dim * self.out_dim);
        for (f, g) in features.pixels().zip(grad_logits.pixels()) {
            for (b, gy) in b_part.iter_mut().zip(g) {
                *b += gy;
            }
            for (fk, row) in f.iter().zip(w_part.chunks_exact_mut(self.out_dim)) {
                if *fk == 0.0 {
                    continue;
                }
                for (w, gy) in row.iter_mut().zip(g) {
                    *w += fk * gy;
                }
            }
        }
        Ok(grad)
    }

    /// Appends a zero-initialized output for the abstention class; the
    /// existing outputs are copied verbatim.
    pub fn extend(&self) -> ClassificationHead {
        let out = self.out_dim + 1;
        let mut head = Self::zeros(self.in_dim, out);
        for k in 0..self.in_dim {
            for y in 0..self.out_dim {
                head.set_weight(k, y, self.weight(k, y));
            }
        }
        for y in 0..self.out_dim {
            head.set_bias(y, self.bias(y));
        }
        head
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::softmax_map;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_features(h: usize, w: usize, k: usize, seed: u64) -> PixelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PixelGrid::from_fn(h, w, k, |_, _, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_weights_give_bias_everywhere() {
        let mut head = ClassificationHead::zeros(4, 3);
        head.set_bias(0, 1.5);
        head.set_bias(2, -0.5);
        let z = head.forward(&random_features(3, 3, 4, 1)).unwrap();
        for px in z.pixels() {
            assert_eq!(px, &[1.5, 0.0, -0.5]);
        }
    }

    #[test]
    fn identity_weights_pass_features_through() {
        let mut head = ClassificationHead::zeros(5, 5);
        for k in 0..5 {
            head.set_weight(k, k, 1.0);
        }
        let f = random_features(2, 3, 5, 2);
        assert_eq!(head.forward(&f).unwrap(), f);
    }

    #[test]
    fn forward_matches_naive_loop() {
        let head = ClassificationHead::random(6, 4, 1.0, 9);
        let mut head = head;
        for y in 0..4 {
            head.set_bias(y, y as f64 * 0.3);
        }
        let f = random_features(4, 5, 6, 3);
        let z = head.forward(&f).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                for y in 0..4 {
                    let mut want = head.bias(y);
                    for k in 0..6 {
                        want += f.get(r, c, k) * head.weight(k, y);
                    }
                    assert_abs_diff_eq!(z.get(r, c, y), want, epsilon = 1e-12);
                }
            }
        }
        assert!(head.forward(&random_features(2, 2, 5, 1)).is_err());
    }

    #[test]
    fn backward_unit_cases() {
        let head = ClassificationHead::zeros(3, 2);
        let f = random_features(2, 2, 3, 4);
        let g = head.backward(&f, &PixelGrid::zeros(2, 2, 2)).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));

        let mut f = PixelGrid::zeros(1, 1, 3);
        f.set(0, 0, 1, 1.0);
        let mut gl = PixelGrid::zeros(1, 1, 2);
        gl.set(0, 0, 0, 1.0);
        let g = head.backward(&f, &gl).unwrap();
        for k in 0..3 {
            for y in 0..2 {
                let want = if (k, y) == (1, 0) { 1.0 } else { 0.0 };
                assert_eq!(g.weight(k, y), want);
            }
        }
    }

    #[test]
    fn extension_keeps_inlier_logits_and_adds_neutral_class() {
        let mut head = ClassificationHead::random(5, 4, 1.0, 12);
        head.set_bias(1, 0.7);
        let ext = head.extend();
        assert_eq!(ext.out_dim(), 5);
        let f = random_features(3, 3, 5, 6);
        let before = head.forward(&f).unwrap();
        let after = ext.forward(&f).unwrap();
        for (b, a) in before.pixels().zip(after.pixels()) {
            assert_eq!(&a[..4], b);
            assert_eq!(a[4], 0.0);
        }
        let probs = softmax_map(&after);
        for (b, p) in before.pixels().zip(probs.pixels()) {
            let denom: f64 = b.iter().map(|v| v.exp()).sum::<f64>() + 1.0;
            assert_abs_diff_eq!(p[4], 1.0 / denom, epsilon = 1e-12);
        }
    }
}
