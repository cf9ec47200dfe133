//! Numerical primitives: stable logsumexp, per-pixel softmax, inlier free
//! energy and Gaussian smoothing.

use crate::error::{PebalError, Result};
use crate::grid::PixelGrid;

/// `log Σ exp(v)` with the maximum factored out.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(PebalError::arg("logsumexp of an empty sequence"));
    }
    Ok(logsumexp_unchecked(values))
}

#[inline]
pub(crate) fn logsumexp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.len() == 1 {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// In-place softmax of one pixel's logits.
#[inline]
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-pixel softmax over every channel.
pub fn softmax_map(logits: &PixelGrid) -> PixelGrid {
    let mut out = logits.clone();
    for (src, dst) in logits.pixels().zip(out.pixels_mut()) {
        softmax_into(src, dst);
    }
    out
}

/// Per-pixel softmax over the first `num_inlier_classes` channels only.
pub fn inlier_softmax_map(logits: &PixelGrid, num_inlier_classes: usize) -> Result<PixelGrid> {
    check_inlier_range(logits, num_inlier_classes)?;
    let mut out = PixelGrid::zeros(logits.height(), logits.width(), num_inlier_classes);
    for (src, dst) in logits.pixels().zip(out.pixels_mut()) {
        softmax_into(&src[..num_inlier_classes], dst);
    }
    Ok(out)
}

fn check_inlier_range(logits: &PixelGrid, num_inlier_classes: usize) -> Result<()> {
    if num_inlier_classes == 0 || num_inlier_classes > logits.depth() {
        return Err(PebalError::arg(format!(
            "inlier class count {} out of range for logit depth {}",
            num_inlier_classes,
            logits.depth()
        )));
    }
    Ok(())
}

/// Inlier free energy `E = -logsumexp(z_1..z_Y)` per pixel.
///
/// Channels past `num_inlier_classes` (the abstention channel of a fine-tuned
/// head) never enter the energy. A head without an abstention channel is
/// accepted with `num_inlier_classes == depth`.
pub fn free_energy_map(logits: &PixelGrid, num_inlier_classes: usize) -> Result<PixelGrid> {
    check_inlier_range(logits, num_inlier_classes)?;
    let data = logits
        .pixels()
        .map(|px| -logsumexp_unchecked(&px[..num_inlier_classes]))
        .collect();
    PixelGrid::from_vec(logits.height(), logits.width(), 1, data)
}

/// Maps any integer offset into `0..n` with half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`).
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1-D Gaussian taps for an odd `kernel_size`.
pub fn gaussian_kernel_1d(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(PebalError::arg(format!(
            "smoothing kernel size must be odd and positive, got {kernel_size}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PebalError::arg(format!(
            "smoothing sigma must be positive, got {sigma}"
        )));
    }
    let half = (kernel_size / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(taps)
}

/// Smoothing parameters for energy maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothing {
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            sigma: 1.0,
        }
    }
}

impl Smoothing {
    pub const NONE: Smoothing = Smoothing {
        kernel_size: 1,
        sigma: 1.0,
    };
}

/// Separable Gaussian blur of a single-channel map with reflect padding.
pub fn gaussian_smooth(map: &PixelGrid, kernel_size: usize, sigma: f64) -> Result<PixelGrid> {
    if map.depth() != 1 {
        return Err(PebalError::arg(format!(
            "gaussian_smooth expects a single-channel map, got depth {}",
            map.depth()
        )));
    }
    let taps = gaussian_kernel_1d(kernel_size, sigma)?;
    if kernel_size == 1 {
        return Ok(map.clone());
    }
    let (h, w) = (map.height(), map.width());
    let half = (kernel_size / 2) as isize;
    let src = map.as_slice();

    let mut horizontal = vec![0.0; h * w];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                acc += wt * row[reflect_index(c as isize + t as isize - half, w)];
            }
            horizontal[r * w + c] = acc;
        }
    }

    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                acc += wt * horizontal[reflect_index(r as isize + t as isize - half, h) * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    PixelGrid::from_vec(h, w, 1, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_examples() {
        assert_abs_diff_eq!(logsumexp(&[0.0; 4]).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert_eq!(logsumexp(&[-3.25]).unwrap(), -3.25);
        assert_abs_diff_eq!(
            logsumexp(&[1000.0, 1000.0]).unwrap(),
            1000.0 + 2f64.ln(),
            epsilon = 1e-12
        );
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let g = PixelGrid::from_vec(1, 2, 3, vec![0.0, 0.0, 0.0, 2f64.ln(), 0.0, 0.0]).unwrap();
        let p = softmax_map(&g);
        for &v in p.pixel(0) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p.get(0, 1, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(0, 1, 1), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(0, 1, 2), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn free_energy_examples() {
        let g = PixelGrid::from_vec(1, 1, 5, vec![0.0, 0.0, 0.0, 0.0, 7.0]).unwrap();
        assert_abs_diff_eq!(
            free_energy_map(&g, 4).unwrap().get(0, 0, 0),
            -(4f64.ln()),
            epsilon = 1e-15
        );
        let g = PixelGrid::from_vec(1, 1, 2, vec![3.5, -1.0]).unwrap();
        assert_eq!(free_energy_map(&g, 1).unwrap().get(0, 0, 0), -3.5);

        // scalar oracle: 10 + ln(1 + 3 e^-10)
        let g = PixelGrid::from_vec(1, 1, 5, vec![10.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = -(10.0 + (1.0 + 3.0 * (-10f64).exp()).ln());
        assert_abs_diff_eq!(
            free_energy_map(&g, 4).unwrap().get(0, 0, 0),
            expected,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(expected, -10.000_136_19, epsilon = 1e-8);

        assert!(free_energy_map(&g, 6).is_err());
        assert!(free_energy_map(&g, 0).is_err());
    }

    #[test]
    fn reflect_index_matches_symmetric_padding() {
        let n = 4;
        let got: Vec<usize> = (-5..9).map(|i| reflect_index(i, n)).collect();
        assert_eq!(got, vec![3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0, 0]);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(7, 1), 0);
    }

    #[test]
    fn smoothing_rejects_bad_arguments() {
        let m = PixelGrid::zeros(3, 3, 1);
        assert!(gaussian_smooth(&m, 4, 1.0).is_err());
        assert!(gaussian_smooth(&m, 3, 0.0).is_err());
        assert!(gaussian_smooth(&PixelGrid::zeros(3, 3, 2), 3, 1.0).is_err());
    }

    #[test]
    fn smoothing_identity_and_constant() {
        let m = PixelGrid::from_fn(5, 4, 1, |r, c, _| (r * 7 + c) as f64 * 0.3 - 2.0);
        assert_eq!(gaussian_smooth(&m, 1, 2.0).unwrap(), m);
        let k = PixelGrid::filled(6, 5, 1, -4.5);
        let s = gaussian_smooth(&k, 7, 1.0).unwrap();
        for &v in s.as_slice() {
            assert_abs_diff_eq!(v, -4.5, epsilon = 1e-12);
        }
    }

    /// Direct 2-D convolution with the outer-product kernel.
    fn brute_force_smooth(map: &PixelGrid, k: usize, sigma: f64) -> PixelGrid {
        let half = (k / 2) as isize;
        let mut w2 = vec![vec![0.0; k]; k];
        let mut total = 0.0;
        for (i, row) in w2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as isize - half, j as isize - half);
                *v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                total += *v;
            }
        }
        let (h, w) = (map.height() as isize, map.width() as isize);
        let refl = |i: isize, n: isize| {
            let p = 2 * n;
            let m = i.rem_euclid(p);
            if m < n {
                m
            } else {
                p - 1 - m
            }
        };
        PixelGrid::from_fn(map.height(), map.width(), 1, |r, c, _| {
            let mut acc = 0.0;
            for (i, row) in w2.iter().enumerate() {
                for (j, wt) in row.iter().enumerate() {
                    let rr = refl(r as isize + i as isize - half, h) as usize;
                    let cc = refl(c as isize + j as isize - half, w) as usize;
                    acc += wt / total * map.get(rr, cc, 0);
                }
            }
            acc
        })
    }

    #[test]
    fn impulse_mass_is_conserved() {
        for n in [3usize, 5, 9] {
            let mut m = PixelGrid::zeros(n, n, 1);
            m.set(n / 2, n / 2, 0, 1.0);
            let s = gaussian_smooth(&m, 3, 1.0).unwrap();
            assert_abs_diff_eq!(s.sum(), 1.0, epsilon = 1e-12);
            let oracle = brute_force_smooth(&m, 3, 1.0);
            assert_abs_diff_eq!(oracle.sum(), 1.0, epsilon = 1e-12);
            for (a, b) in s.as_slice().iter().zip(oracle.as_slice()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    // logit spread stays small enough that no probability rounds to 0 or 1
    fn arb_grid(depth: usize) -> impl Strategy<Value = PixelGrid> {
        (1usize..7, 1usize..7).prop_flat_map(move |(h, w)| {
            proptest::collection::vec(-10.0f64..10.0, h * w * depth)
                .prop_map(move |d| PixelGrid::from_vec(h, w, depth, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn logsumexp_bounds(v in proptest::collection::vec(-700.0f64..700.0, 1..20)) {
            let l = logsumexp(&v).unwrap();
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= max);
            prop_assert!(l <= max + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(g in arb_grid(3), shift in -50.0f64..50.0) {
            let p = softmax_map(&g);
            for px in p.pixels() {
                let s: f64 = px.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(px.iter().all(|&v| v > 0.0 && v < 1.0));
            }
            let shifted = softmax_map(&g.map(|v| v + shift));
            for (a, b) in p.as_slice().iter().zip(shifted.as_slice()) {
                prop_assert!((a - b).abs() / a.abs() < 1e-9);
            }
        }

        #[test]
        fn energy_is_antitone(g in arb_grid(5), ch in 0usize..4, bump in 0.01f64..5.0) {
            let e0 = free_energy_map(&g, 4).unwrap();
            let mut raised = g.clone();
            for px in raised.pixels_mut() {
                px[ch] += bump;
            }
            let e1 = free_energy_map(&raised, 4).unwrap();
            for (a, b) in e0.as_slice().iter().zip(e1.as_slice()) {
                prop_assert!(b < a);
            }
        }

        #[test]
        fn smoothing_is_convex_combination(g in arb_grid(1), k in prop::sample::select(vec![1usize, 3, 5, 7]), sigma in 0.3f64..3.0) {
            let s = gaussian_smooth(&g, k, sigma).unwrap();
            let (lo, hi) = (g.min(), g.max());
            for &v in s.as_slice() {
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
            let oracle = brute_force_smooth(&g, k, sigma);
            for (a, b) in s.as_slice().iter().zip(oracle.as_slice()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn random_softmax_channel_sums() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g = PixelGrid::from_fn(4, 4, 3, |_, _, _| rng.random_range(-8.0..8.0));
        for px in softmax_map(&g).pixels() {
            assert_abs_diff_eq!(px.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }
}
