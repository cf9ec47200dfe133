//! Test-time anomaly scoring and final segmentation.

use std::fmt;
use std::str::FromStr;

use crate::error::{PebalError, Result};
use crate::grid::{LabelMap, LabeledSample, PixelGrid};
use crate::metrics::{argmax, threshold_at_tpr, ScoredPixels};
use crate::model::{ClassificationHead, FeatureExtractor};
use crate::numeric::{free_energy_map, gaussian_smooth, inlier_softmax_map, Smoothing};
use crate::parallel::par_map;

/// Per-pixel anomaly score; higher means more anomalous. All rules look at
/// the inlier channels only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreRule {
    /// `1 - max softmax`.
    Msp,
    /// `-max logit`.
    MaxLogit,
    /// Softmax entropy.
    Entropy,
    /// Raw inlier free energy.
    Energy,
    /// Gaussian-smoothed inlier free energy.
    Pebal,
}

impl ScoreRule {
    pub const ALL: [ScoreRule; 5] = [
        ScoreRule::Msp,
        ScoreRule::MaxLogit,
        ScoreRule::Entropy,
        ScoreRule::Energy,
        ScoreRule::Pebal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreRule::Msp => "msp",
            ScoreRule::MaxLogit => "maxlogit",
            ScoreRule::Entropy => "entropy",
            ScoreRule::Energy => "energy",
            ScoreRule::Pebal => "pebal",
        }
    }
}

impl FromStr for ScoreRule {
    type Err = PebalError;

    fn from_str(s: &str) -> Result<Self> {
        ScoreRule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                PebalError::arg(format!(
                    "unknown baseline '{s}' (msp, maxlogit, entropy, energy, pebal)"
                ))
            })
    }
}

impl fmt::Display for ScoreRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_classes(logits: &PixelGrid, y: usize) -> Result<()> {
    if y < 1 || y > logits.depth() {
        return Err(PebalError::arg(format!(
            "{y} inlier classes do not fit logits of depth {}",
            logits.depth()
        )));
    }
    Ok(())
}

/// Score map of `rule` from precomputed logits. Only [`ScoreRule::Pebal`]
/// uses `smoothing`.
pub fn score_from_logits(
    logits: &PixelGrid,
    num_inlier_classes: usize,
    rule: ScoreRule,
    smoothing: Smoothing,
) -> Result<PixelGrid> {
    check_classes(logits, num_inlier_classes)?;
    let y = num_inlier_classes;
    let per_pixel = |f: &dyn Fn(&[f64]) -> f64| {
        let data = logits.pixels().map(|px| f(&px[..y])).collect();
        PixelGrid::from_vec(logits.height(), logits.width(), 1, data)
    };
    let score = match rule {
        ScoreRule::Msp => {
            let probs = inlier_softmax_map(logits, y)?;
            PixelGrid::from_vec(
                logits.height(),
                logits.width(),
                1,
                probs.pixels().map(|p| 1.0 - argmax(p).1).collect(),
            )?
        }
        ScoreRule::MaxLogit => per_pixel(&|z| -argmax(z).1)?,
        ScoreRule::Entropy => {
            let probs = inlier_softmax_map(logits, y)?;
            PixelGrid::from_vec(
                logits.height(),
                logits.width(),
                1,
                probs
                    .pixels()
                    .map(|p| {
                        -p.iter()
                            .filter(|&&v| v > 0.0)
                            .map(|&v| v * v.ln())
                            .sum::<f64>()
                    })
                    .collect(),
            )?
        }
        ScoreRule::Energy => free_energy_map(logits, y)?,
        ScoreRule::Pebal => gaussian_smooth(
            &free_energy_map(logits, y)?,
            smoothing.kernel_size,
            smoothing.sigma,
        )?,
    };
    if !score.is_finite() {
        return Err(PebalError::Numerical(format!(
            "{rule} score map is not finite"
        )));
    }
    Ok(score)
}

/// Head logits for one image, rejecting non-finite parameters.
pub fn logits(
    extractor: &FeatureExtractor,
    head: &ClassificationHead,
    image: &PixelGrid,
) -> Result<PixelGrid> {
    head.check_finite()?;
    head.forward(&extractor.extract(image)?)
}

/// Smoothed inlier free energy of `image`.
pub fn anomaly_score_map(
    extractor: &FeatureExtractor,
    head: &ClassificationHead,
    num_inlier_classes: usize,
    image: &PixelGrid,
    smoothing: Smoothing,
) -> Result<PixelGrid> {
    score_from_logits(
        &logits(extractor, head, image)?,
        num_inlier_classes,
        ScoreRule::Pebal,
        smoothing,
    )
}

/// `Y + 1` where `score > tau`, otherwise the inlier argmax (lowest class
/// index on ties).
pub fn segment_from(
    logits: &PixelGrid,
    score: &PixelGrid,
    num_inlier_classes: u8,
    tau: f64,
) -> Result<LabelMap> {
    let y = num_inlier_classes as usize;
    check_classes(logits, y)?;
    if !score.same_plane(logits) || score.depth() != 1 {
        return Err(PebalError::arg("score map shape does not match logits"));
    }
    let labels = logits
        .pixels()
        .zip(score.as_slice())
        .map(|(z, &s)| {
            if s > tau {
                num_inlier_classes + 1
            } else {
                argmax(&z[..y]).0 as u8 + 1
            }
        })
        .collect();
    LabelMap::new(logits.height(), logits.width(), num_inlier_classes, labels)
}

pub fn segment(
    extractor: &FeatureExtractor,
    head: &ClassificationHead,
    num_inlier_classes: u8,
    image: &PixelGrid,
    tau: f64,
    smoothing: Smoothing,
) -> Result<LabelMap> {
    let z = logits(extractor, head, image)?;
    let score = score_from_logits(&z, num_inlier_classes as usize, ScoreRule::Pebal, smoothing)?;
    segment_from(&z, &score, num_inlier_classes, tau)
}

/// Everything evaluation needs from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: PixelGrid,
    /// Inlier softmax, depth `Y`.
    pub probs: PixelGrid,
    pub pred: LabelMap,
}

/// Scores and segments a batch of images in parallel.
pub fn predict_all(
    extractor: &FeatureExtractor,
    head: &ClassificationHead,
    num_inlier_classes: u8,
    images: &[&PixelGrid],
    rule: ScoreRule,
    smoothing: Smoothing,
    tau: f64,
) -> Result<Vec<Prediction>> {
    par_map(images, |image| {
        let z = logits(extractor, head, image)?;
        let y = num_inlier_classes as usize;
        let score = score_from_logits(&z, y, rule, smoothing)?;
        let probs = inlier_softmax_map(&z, y)?;
        let pred = segment_from(&z, &score, num_inlier_classes, tau)?;
        Ok(Prediction { score, probs, pred })
    })
    .into_iter()
    .collect()
}

/// Threshold that reaches `tpr_target` anomaly recall on `samples` under the
/// strict `score > tau` rule.
pub fn calibrate_threshold(
    scores: &[PixelGrid],
    samples: &[&LabeledSample],
    tpr_target: f64,
) -> Result<f64> {
    if scores.len() != samples.len() {
        return Err(PebalError::arg("one score map per sample is required"));
    }
    let mut sp = ScoredPixels::default();
    for (s, sample) in scores.iter().zip(samples) {
        sp.push_map(s, &sample.labels)?;
    }
    threshold_at_tpr(&sp, tpr_target)
}
