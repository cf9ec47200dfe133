//! Central finite-difference verification of the analytic gradients.
//!
//! The adaptive penalty is detached from the graph, so every perturbed
//! evaluation reuses the penalty map of the unperturbed logits. Instances
//! with an energy within `kink_margin` of a hinge or absolute-value kink are
//! redrawn and counted separately.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PebalError, Result};
use crate::grid::{LabelMap, PixelGrid, IGNORE};
use crate::losses::{
    abstention_penalty, anomaly_mask, counted_mask, inlier_mask, objective_with_penalty,
    EbmMasking, LossConfig, PenaltyMode,
};
use crate::model::ClassificationHead;
use crate::numeric::free_energy_map;
use crate::parallel::{derive_seed, par_map_range};

/// Denominator floor of [`relative_error`]. Components smaller than this are
/// compared in absolute terms; central differences at `eps = 1e-5` on an
/// O(10) objective carry round-off of order 1e-10.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub height: usize,
    pub width: usize,
    pub num_inlier_classes: u8,
    pub num_features: usize,
    pub trials: usize,
    pub epsilon: f64,
    pub kink_margin: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            height: 6,
            width: 6,
            num_inlier_classes: 4,
            num_features: 8,
            trials: 100,
            epsilon: 1e-5,
            kink_margin: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Draws rejected because some energy sat within the kink margin.
    pub excluded_near_kink: usize,
    pub max_rel_err_logits: f64,
    pub max_rel_err_params: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.max_rel_err_logits.max(self.max_rel_err_params)
    }
}

fn frozen_penalty(
    logits: &PixelGrid,
    labels: &LabelMap,
    loss: &LossConfig,
) -> Result<Option<PixelGrid>> {
    Ok(match loss.penalty {
        PenaltyMode::Adaptive => Some(abstention_penalty(
            &free_energy_map(logits, labels.num_inlier_classes())?,
            loss.a_min,
        )),
        _ => None,
    })
}

/// Worst relative error between the analytic logit gradient and central
/// differences for one instance.
pub fn check_logits(
    logits: &PixelGrid,
    labels: &LabelMap,
    is_outlier: bool,
    loss: &LossConfig,
    epsilon: f64,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    let penalty = frozen_penalty(logits, labels, loss)?;
    let report = objective_with_penalty(logits, labels, is_outlier, loss, penalty.as_ref())?;
    let eval = |z: &PixelGrid| -> Result<f64> {
        Ok(objective_with_penalty(z, labels, is_outlier, loss, penalty.as_ref())?.total)
    };
    let mut probe = logits.clone();
    let mut worst = 0.0f64;
    for i in 0..logits.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + epsilon;
        let up = eval(&probe)?;
        probe.as_mut_slice()[i] = orig - epsilon;
        let down = eval(&probe)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(report.grad_logits.as_slice()[i], numeric));
    }
    Ok(worst)
}

/// Same check through the head: parameters are perturbed, features fixed.
pub fn check_head_params(
    head: &ClassificationHead,
    features: &PixelGrid,
    labels: &LabelMap,
    is_outlier: bool,
    loss: &LossConfig,
    epsilon: f64,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    let logits = head.forward(features)?;
    let penalty = frozen_penalty(&logits, labels, loss)?;
    let report = objective_with_penalty(&logits, labels, is_outlier, loss, penalty.as_ref())?;
    let analytic = head.backward(features, &report.grad_logits)?;
    let mut probe = head.clone();
    let mut worst = 0.0f64;
    for i in 0..head.params().len() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + epsilon;
        let up = objective_with_penalty(
            &probe.forward(features)?,
            labels,
            is_outlier,
            loss,
            penalty.as_ref(),
        )?
        .total;
        probe.params_mut()[i] = orig - epsilon;
        let down = objective_with_penalty(
            &probe.forward(features)?,
            labels,
            is_outlier,
            loss,
            penalty.as_ref(),
        )?
        .total;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.params[i], numeric));
    }
    Ok(worst)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(PebalError::arg(format!(
            "finite-difference epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    Ok(())
}

/// True when any energy used by a non-smooth term lies within `margin` of
/// its kink.
pub fn near_kink(
    logits: &PixelGrid,
    labels: &LabelMap,
    is_outlier: bool,
    loss: &LossConfig,
    margin: f64,
) -> Result<bool> {
    let energy = free_energy_map(logits, labels.num_inlier_classes())?;
    let e = energy.as_slice();
    let counted = counted_mask(labels);
    let (in_mask, out_mask) = match loss.ebm_masking {
        EbmMasking::ByLabel => (inlier_mask(labels), anomaly_mask(labels)),
        EbmMasking::ByImage if is_outlier => (
            crate::grid::Mask::new(labels.height(), labels.width(), vec![false; e.len()])?,
            counted.clone(),
        ),
        EbmMasking::ByImage => (
            counted.clone(),
            crate::grid::Mask::new(labels.height(), labels.width(), vec![false; e.len()])?,
        ),
    };
    let w = labels.width();
    for i in 0..e.len() {
        if loss.lambda > 0.0 {
            if in_mask.bits[i] && (e[i] - loss.m_in).abs() < margin {
                return Ok(true);
            }
            if out_mask.bits[i] && (e[i] - loss.m_out).abs() < margin {
                return Ok(true);
            }
        }
        if !counted.bits[i] {
            continue;
        }
        if loss.beta2 > 0.0 && e[i].abs() < margin {
            return Ok(true);
        }
        if loss.beta1 > 0.0 {
            let right = (i % w + 1 < w).then_some(i + 1);
            let down = (i + w < e.len()).then_some(i + w);
            for j in [right, down].into_iter().flatten() {
                if counted.bits[j] && (e[i] - e[j]).abs() < margin {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

/// A random head, feature map and label map. Feature 0 is a per-pixel level
/// in `[0, 1.4]` wired to every inlier logit with weight 10, which spreads
/// inlier energies over roughly `[-16, 0]` so both hinges are exercised.
pub fn random_instance(
    config: &GradCheckConfig,
    is_outlier: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ClassificationHead, PixelGrid, LabelMap)> {
    let y = config.num_inlier_classes as usize;
    let k = config.num_features.max(2);
    let (h, w) = (config.height, config.width);
    let features = PixelGrid::from_fn(h, w, k, |_, _, ch| {
        if ch == 0 {
            rng.random_range(0.0..1.4)
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    let mut head = ClassificationHead::zeros(k, y + 1);
    for f in 0..k {
        for c in 0..=y {
            let v = if f == 0 && c < y {
                10.0
            } else {
                rng.random_range(-1.0..1.0)
            };
            head.set_weight(f, c, v);
        }
    }
    for c in 0..=y {
        head.set_bias(c, rng.random_range(-1.0..1.0));
    }
    let anomaly = config.num_inlier_classes + 1;
    let labels = (0..h * w)
        .map(|_| {
            let u: f64 = rng.random();
            if u < 0.1 {
                IGNORE
            } else if is_outlier && u < 0.4 {
                anomaly
            } else {
                rng.random_range(1..=config.num_inlier_classes)
            }
        })
        .collect();
    let labels = LabelMap::new(h, w, config.num_inlier_classes, labels)?;
    Ok((head, features, labels))
}

/// Runs `trials` kink-free random instances, alternating inlier and outlier
/// images, and reports the worst relative errors for logit and head
/// parameter gradients.
pub fn finite_diff_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    check_epsilon(config.epsilon)?;
    config.loss.validate()?;
    let per_trial = par_map_range(config.trials, |t| -> Result<(usize, f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, t as u64));
        let is_outlier = t % 2 == 1;
        let mut excluded = 0;
        loop {
            let (head, features, labels) = random_instance(config, is_outlier, &mut rng)?;
            let logits = head.forward(&features)?;
            if near_kink(
                &logits,
                &labels,
                is_outlier,
                &config.loss,
                config.kink_margin,
            )? {
                excluded += 1;
                if excluded > 10_000 {
                    return Err(PebalError::arg("could not draw a kink-free instance"));
                }
                continue;
            }
            let el = check_logits(&logits, &labels, is_outlier, &config.loss, config.epsilon)?;
            let ep = check_head_params(
                &head,
                &features,
                &labels,
                is_outlier,
                &config.loss,
                config.epsilon,
            )?;
            return Ok((excluded, el, ep));
        }
    });
    let mut report = GradCheckReport {
        trials: config.trials,
        excluded_near_kink: 0,
        max_rel_err_logits: 0.0,
        max_rel_err_params: 0.0,
    };
    for r in per_trial {
        let (ex, el, ep) = r?;
        report.excluded_near_kink += ex;
        report.max_rel_err_logits = report.max_rel_err_logits.max(el);
        report.max_rel_err_params = report.max_rel_err_params.max(ep);
    }
    Ok(report)
}
