//! The energy-biased abstention objective and its analytic gradients.
//!
//! Every term is reduced as a mean over the pixels it counts, so loss scale
//! and the relative weights `lambda`, `beta1`, `beta2` do not depend on image
//! resolution. Gradients of energy-based terms are first accumulated with
//! respect to the energy map and then chained into the inlier logit channels
//! through `dE/dz_j = -softmax_inlier(z)_j`.

use crate::error::{PebalError, Result};
use crate::grid::{LabelMap, Mask, PixelGrid, IGNORE};
use crate::numeric::{free_energy_map, logsumexp_unchecked, softmax_into};

/// How the abstention penalty `a` is obtained for each pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyMode {
    /// `a = max(E^2, a_min)` from the current (detached) inlier free energy.
    Adaptive,
    /// One constant penalty for every pixel.
    Fixed(f64),
    /// Infinite penalty: abstention earns nothing and the abstention term
    /// degenerates to cross-entropy over `Y + 1` classes.
    CrossEntropy,
}

/// Which pixels each energy hinge sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EbmMasking {
    /// Inlier hinge on inlier-labeled pixels of every image, outlier hinge on
    /// anomaly-labeled pixels only.
    ByLabel,
    /// Inlier hinge on all counted pixels of inlier images, outlier hinge on
    /// all counted pixels of outlier images.
    ByImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Inlier energy margin.
    pub m_in: f64,
    /// Outlier energy margin.
    pub m_out: f64,
    /// Weight of the two energy hinges.
    pub lambda: f64,
    /// Smoothness weight.
    pub beta1: f64,
    /// Sparsity weight.
    pub beta2: f64,
    /// Floor of the adaptive penalty; must exceed 1.
    pub a_min: f64,
    pub penalty: PenaltyMode,
    pub ebm_masking: EbmMasking,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m_in: -12.0,
            m_out: -6.0,
            lambda: 0.1,
            beta1: 5e-4,
            beta2: 3e-6,
            a_min: 1.05,
            penalty: PenaltyMode::Adaptive,
            ebm_masking: EbmMasking::ByLabel,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.m_in,
            self.m_out,
            self.lambda,
            self.beta1,
            self.beta2,
            self.a_min,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(PebalError::arg("loss parameters must be finite"));
        }
        if self.m_in >= self.m_out {
            return Err(PebalError::arg(format!(
                "m_in ({}) must be below m_out ({})",
                self.m_in, self.m_out
            )));
        }
        if self.lambda < 0.0 || self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(PebalError::arg(
                "lambda, beta1 and beta2 must be non-negative",
            ));
        }
        if self.a_min <= 1.0 {
            return Err(PebalError::arg(format!(
                "a_min must exceed 1, got {}",
                self.a_min
            )));
        }
        if let PenaltyMode::Fixed(a) = self.penalty {
            if !(a > 1.0 && a.is_finite()) {
                return Err(PebalError::arg(format!(
                    "fixed penalty must be a finite value above 1, got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar terms of one evaluation plus the gradient w.r.t. the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub pal: f64,
    pub ebm_in: f64,
    pub ebm_out: f64,
    pub reg: f64,
    pub total: f64,
    pub grad_logits: PixelGrid,
    /// Pixels counted by the abstention term (non-IGNORE).
    pub counted_pixels: usize,
}

/// `a = max(E^2, a_min)` per pixel.
pub fn abstention_penalty(energy: &PixelGrid, a_min: f64) -> PixelGrid {
    energy.map(|e| (e * e).max(a_min))
}

/// Mask of pixels labeled with an inlier class.
pub fn inlier_mask(labels: &LabelMap) -> Mask {
    Mask::new(
        labels.height(),
        labels.width(),
        labels
            .as_slice()
            .iter()
            .map(|&l| labels.is_inlier(l))
            .collect(),
    )
    .expect("same size")
}

/// Mask of pixels labeled with the anomaly class.
pub fn anomaly_mask(labels: &LabelMap) -> Mask {
    Mask::new(
        labels.height(),
        labels.width(),
        labels
            .as_slice()
            .iter()
            .map(|&l| labels.is_anomaly(l))
            .collect(),
    )
    .expect("same size")
}

/// Mask of every non-IGNORE pixel.
pub fn counted_mask(labels: &LabelMap) -> Mask {
    Mask::new(
        labels.height(),
        labels.width(),
        labels.as_slice().iter().map(|&l| l != IGNORE).collect(),
    )
    .expect("same size")
}

/// Source of `1/a` for the abstention term.
#[derive(Clone, Copy)]
enum InvPenalty<'a> {
    Constant(f64),
    Grid(&'a PixelGrid),
}

impl InvPenalty<'_> {
    #[inline]
    fn at(&self, pixel: usize) -> f64 {
        match self {
            InvPenalty::Constant(v) => *v,
            InvPenalty::Grid(g) => 1.0 / g.as_slice()[pixel],
        }
    }
}

fn check_logits_labels(logits: &PixelGrid, labels: &LabelMap) -> Result<()> {
    if !labels.same_plane(logits) {
        return Err(PebalError::arg(format!(
            "logits {}x{} and labels {}x{} differ in size",
            logits.height(),
            logits.width(),
            labels.height(),
            labels.width()
        )));
    }
    if logits.depth() != labels.num_inlier_classes() + 1 {
        return Err(PebalError::arg(format!(
            "logit depth {} must equal Y + 1 = {}",
            logits.depth(),
            labels.num_inlier_classes() + 1
        )));
    }
    Ok(())
}

/// Abstention loss `mean_ω -log(p(y_ω) + p(Y+1) / a_ω)` over non-IGNORE
/// pixels; `a` is treated as a constant. The gradient w.r.t. the logits is
/// added to `grad_out`.
pub fn pal_loss(
    logits: &PixelGrid,
    labels: &LabelMap,
    penalty: &PixelGrid,
    grad_out: &mut PixelGrid,
) -> Result<f64> {
    check_logits_labels(logits, labels)?;
    if !penalty.same_plane(logits) || penalty.depth() != 1 {
        return Err(PebalError::arg(
            "penalty map must be single-channel and match logits",
        ));
    }
    if let Some(bad) = penalty.as_slice().iter().find(|&&a| a <= 1.0) {
        return Err(PebalError::arg(format!(
            "abstention penalty must exceed 1, found {bad}"
        )));
    }
    if !grad_out.same_shape(logits) {
        return Err(PebalError::arg("gradient accumulator shape mismatch"));
    }
    Ok(pal_core(
        logits,
        labels,
        InvPenalty::Grid(penalty),
        1.0,
        grad_out,
    ))
}

/// Shared abstention kernel; gradient is scaled by `weight` on accumulation.
fn pal_core(
    logits: &PixelGrid,
    labels: &LabelMap,
    inv_penalty: InvPenalty<'_>,
    weight: f64,
    grad_out: &mut PixelGrid,
) -> f64 {
    let depth = logits.depth();
    let abstain = depth - 1;
    let counted = labels.as_slice().iter().filter(|&&l| l != IGNORE).count();
    if counted == 0 {
        return 0.0;
    }
    let scale = 1.0 / counted as f64;
    let mut probs = vec![0.0; depth];
    let mut total = 0.0;
    for (pixel, &label) in labels.as_slice().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let z = logits.pixel(pixel);
        let target = label as usize - 1;
        let inv_a = inv_penalty.at(pixel);
        let lse_all = logsumexp_unchecked(z);
        softmax_into(z, &mut probs);

        // log of the numerator sum Σ_j w_j exp(z_j), with w_target = 1 and
        // w_abstain += 1/a
        let log_num = if target == abstain {
            z[abstain] + inv_a.ln_1p()
        } else if inv_a > 0.0 {
            logsumexp_unchecked(&[z[target], z[abstain] + inv_a.ln()])
        } else {
            z[target]
        };
        total -= log_num - lse_all;

        let g = grad_out.pixel_mut(pixel);
        for (j, (gj, &pj)) in g.iter_mut().zip(&probs).enumerate() {
            let w = if j == target && j == abstain {
                1.0 + inv_a
            } else if j == target {
                1.0
            } else if j == abstain {
                inv_a
            } else {
                0.0
            };
            // w_j p_j / q = w_j exp(z_j - log_num)
            let share = if w > 0.0 {
                w * (z[j] - log_num).exp()
            } else {
                0.0
            };
            *gj += weight * scale * (pj - share);
        }
    }
    total * scale
}

/// Mean over masked pixels of `max(0, E - m_in)^2`. The derivative w.r.t.
/// the energy is added to `grad_energy`. An empty mask yields 0.
pub fn ebm_inlier_loss(
    energy: &PixelGrid,
    mask: &Mask,
    m_in: f64,
    grad_energy: &mut PixelGrid,
) -> f64 {
    hinge_core(energy, mask, |e| e - m_in, 1.0, grad_energy)
}

/// Mean over masked pixels of `max(0, m_out - E)^2`. The derivative w.r.t.
/// the energy is added to `grad_energy`. An empty mask yields 0.
pub fn ebm_outlier_loss(
    energy: &PixelGrid,
    mask: &Mask,
    m_out: f64,
    grad_energy: &mut PixelGrid,
) -> f64 {
    hinge_core(energy, mask, |e| m_out - e, -1.0, grad_energy)
}

fn hinge_core(
    energy: &PixelGrid,
    mask: &Mask,
    excess: impl Fn(f64) -> f64,
    direction: f64,
    grad_energy: &mut PixelGrid,
) -> f64 {
    let count = mask.popcount();
    if count == 0 {
        return 0.0;
    }
    let scale = 1.0 / count as f64;
    let grad = grad_energy.as_mut_slice();
    let mut total = 0.0;
    for (pixel, (&e, &on)) in energy.as_slice().iter().zip(&mask.bits).enumerate() {
        if !on {
            continue;
        }
        let h = excess(e).max(0.0);
        total += h * h;
        grad[pixel] += direction * 2.0 * h * scale;
    }
    total * scale
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Smoothness plus sparsity regularizer, summed (not averaged):
/// `beta1 Σ (|E_ω - E_right| + |E_ω - E_down|) + beta2 Σ |E_ω|`.
///
/// Each unordered horizontal or vertical neighbour pair is counted once.
/// With a mask, only masked pixels (and pairs of masked pixels) count.
/// Subgradients are 0 at ties.
pub fn energy_reg_loss(
    energy: &PixelGrid,
    beta1: f64,
    beta2: f64,
    mask: Option<&Mask>,
    grad_energy: &mut PixelGrid,
) -> f64 {
    let (h, w) = (energy.height(), energy.width());
    let e = energy.as_slice();
    let on = |i: usize| mask.is_none_or(|m| m.bits[i]);
    let grad = grad_energy.as_mut_slice();
    let mut smooth = 0.0;
    let mut sparse = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !on(i) {
                continue;
            }
            sparse += e[i].abs();
            grad[i] += beta2 * sign(e[i]);
            let mut pair = |j: usize| {
                if on(j) {
                    let d = e[i] - e[j];
                    smooth += d.abs();
                    let s = sign(d);
                    grad[i] += beta1 * s;
                    grad[j] -= beta1 * s;
                }
            };
            if c + 1 < w {
                pair(i + 1);
            }
            if r + 1 < h {
                pair(i + w);
            }
        }
    }
    beta1 * smooth + beta2 * sparse
}

/// Chains `dL/dE` into the inlier logit channels: `dL/dz_j += dL/dE · (-s_j)`
/// with `s` the softmax over the first `num_inlier_classes` logits.
pub fn chain_energy_grad(
    logits: &PixelGrid,
    num_inlier_classes: usize,
    grad_energy: &PixelGrid,
    grad_logits: &mut PixelGrid,
) {
    let mut s = vec![0.0; num_inlier_classes];
    for (pixel, &ge) in grad_energy.as_slice().iter().enumerate() {
        if ge == 0.0 {
            continue;
        }
        softmax_into(&logits.pixel(pixel)[..num_inlier_classes], &mut s);
        let g = grad_logits.pixel_mut(pixel);
        for (gj, sj) in g.iter_mut().zip(&s) {
            *gj -= ge * sj;
        }
    }
}

/// Full objective for one image:
/// `pal + lambda (ebm_in + ebm_out) + reg`, with the penalty computed from
/// the current energy and held constant for differentiation.
pub fn pebal_objective(
    logits: &PixelGrid,
    labels: &LabelMap,
    is_outlier_image: bool,
    config: &LossConfig,
) -> Result<LossReport> {
    objective_with_penalty(logits, labels, is_outlier_image, config, None)
}

/// [`pebal_objective`] with an optional externally supplied adaptive penalty
/// map. Finite-difference checks pass the penalty of the unperturbed logits
/// so the detached penalty stays fixed while logits move.
pub fn objective_with_penalty(
    logits: &PixelGrid,
    labels: &LabelMap,
    is_outlier_image: bool,
    config: &LossConfig,
    penalty: Option<&PixelGrid>,
) -> Result<LossReport> {
    config.validate()?;
    check_logits_labels(logits, labels)?;
    if !is_outlier_image && labels.anomaly_count() > 0 {
        return Err(PebalError::arg(
            "an inlier image may not contain anomaly-labeled pixels",
        ));
    }
    let y = labels.num_inlier_classes();
    let energy = free_energy_map(logits, y)?;
    let mut grad_logits = PixelGrid::zeros(logits.height(), logits.width(), logits.depth());

    let adaptive;
    let inv_penalty = match config.penalty {
        PenaltyMode::Adaptive => {
            let grid = match penalty {
                Some(p) => {
                    if !p.same_plane(logits) || p.depth() != 1 {
                        return Err(PebalError::arg("penalty map shape mismatch"));
                    }
                    p
                }
                None => {
                    adaptive = abstention_penalty(&energy, config.a_min);
                    &adaptive
                }
            };
            InvPenalty::Grid(grid)
        }
        PenaltyMode::Fixed(a) => InvPenalty::Constant(1.0 / a),
        PenaltyMode::CrossEntropy => InvPenalty::Constant(0.0),
    };
    let pal = pal_core(logits, labels, inv_penalty, 1.0, &mut grad_logits);

    let counted = counted_mask(labels);
    let (in_mask, out_mask) = match config.ebm_masking {
        EbmMasking::ByLabel => (inlier_mask(labels), anomaly_mask(labels)),
        EbmMasking::ByImage => {
            let empty = Mask::new(
                labels.height(),
                labels.width(),
                vec![false; labels.num_pixels()],
            )
            .expect("same size");
            if is_outlier_image {
                (empty, counted.clone())
            } else {
                (counted.clone(), empty)
            }
        }
    };

    let mut grad_in = PixelGrid::zeros(energy.height(), energy.width(), 1);
    let mut grad_out = PixelGrid::zeros(energy.height(), energy.width(), 1);
    let mut grad_reg = PixelGrid::zeros(energy.height(), energy.width(), 1);
    let ebm_in = ebm_inlier_loss(&energy, &in_mask, config.m_in, &mut grad_in);
    let ebm_out = ebm_outlier_loss(&energy, &out_mask, config.m_out, &mut grad_out);

    let n_counted = counted.popcount();
    let reg = if n_counted > 0 && (config.beta1 > 0.0 || config.beta2 > 0.0) {
        let sum = energy_reg_loss(
            &energy,
            config.beta1,
            config.beta2,
            Some(&counted),
            &mut grad_reg,
        );
        let scale = 1.0 / n_counted as f64;
        grad_reg.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
        sum * scale
    } else {
        0.0
    };

    let mut grad_energy = grad_reg;
    grad_energy.add_scaled(&grad_in, config.lambda);
    grad_energy.add_scaled(&grad_out, config.lambda);
    chain_energy_grad(logits, y, &grad_energy, &mut grad_logits);

    let total = pal + config.lambda * (ebm_in + ebm_out) + reg;
    if !total.is_finite() || !grad_logits.is_finite() {
        return Err(PebalError::Numerical(format!(
            "objective is not finite (pal {pal}, ebm_in {ebm_in}, ebm_out {ebm_out}, reg {reg})"
        )));
    }
    Ok(LossReport {
        pal,
        ebm_in,
        ebm_out,
        reg,
        total,
        grad_logits,
        counted_pixels: n_counted,
    })
}

/// Mean per-pixel cross-entropy over all channels, ignoring IGNORE pixels.
/// Gradient w.r.t. the logits is added to `grad_out`.
pub fn cross_entropy_loss(
    logits: &PixelGrid,
    labels: &LabelMap,
    grad_out: &mut PixelGrid,
) -> Result<f64> {
    if !labels.same_plane(logits) || !grad_out.same_shape(logits) {
        return Err(PebalError::arg(
            "logits, labels and gradient differ in size",
        ));
    }
    let depth = logits.depth();
    if let Some(&bad) = labels
        .as_slice()
        .iter()
        .find(|&&l| l != IGNORE && l as usize > depth)
    {
        return Err(PebalError::arg(format!(
            "label {bad} has no logit channel (depth {depth})"
        )));
    }
    let counted = labels.as_slice().iter().filter(|&&l| l != IGNORE).count();
    if counted == 0 {
        return Ok(0.0);
    }
    let scale = 1.0 / counted as f64;
    let mut probs = vec![0.0; depth];
    let mut total = 0.0;
    for (pixel, &label) in labels.as_slice().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let z = logits.pixel(pixel);
        let target = label as usize - 1;
        total += logsumexp_unchecked(z) - z[target];
        softmax_into(z, &mut probs);
        for (j, (g, &p)) in grad_out.pixel_mut(pixel).iter_mut().zip(&probs).enumerate() {
            *g += scale * (p - if j == target { 1.0 } else { 0.0 });
        }
    }
    Ok(total * scale)
}
