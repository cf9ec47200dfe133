//! Inlier pretraining of the head and energy-biased abstention fine-tuning.
//!
//! Features are extracted once per sample (the extractor is frozen), then
//! every optimizer step evaluates per-sample losses and head gradients in
//! parallel and reduces them sequentially in batch order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PebalError, Result};
use crate::grid::{LabelMap, LabeledSample, PixelGrid};
use crate::losses::{cross_entropy_loss, pebal_objective, LossConfig};
use crate::model::optim::{Adam, AdamParams};
use crate::model::{ClassificationHead, FeatureExtractor, HeadGrad};
use crate::parallel::par_map;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub seed: u64,
    pub loss: LossConfig,
    /// Share of each fine-tuning minibatch drawn from the outlier set.
    pub outlier_batch_fraction: f64,
}

impl Default for TrainConfig {
    /// Fine-tuning defaults for the 64×64 synthetic benchmark.
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.02,
            adam: AdamParams::default(),
            seed: 0,
            loss: LossConfig::default(),
            outlier_batch_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    /// Pretraining defaults for the synthetic benchmark.
    pub fn pretrain_default() -> Self {
        Self {
            learning_rate: 0.05,
            ..Self::default()
        }
    }

    /// Hyperparameters published for full-size fine-tuning of a pretrained
    /// segmentation network (20 epochs, batch 16, learning rate 1e-5).
    pub fn published() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PebalError::arg("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PebalError::arg(
                "learning_rate must be finite and non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_batch_fraction) {
            return Err(PebalError::arg("outlier_batch_fraction must lie in [0, 1]"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta_m) || !(0.0..1.0).contains(&a.beta_v) || a.epsilon <= 0.0 {
            return Err(PebalError::arg("invalid Adam parameters"));
        }
        self.loss.validate()
    }
}

/// A sample with its frozen feature map.
#[derive(Debug, Clone)]
pub struct FeatureSample {
    pub features: PixelGrid,
    pub labels: LabelMap,
    pub is_outlier: bool,
}

pub fn featurize(
    extractor: &FeatureExtractor,
    samples: &[LabeledSample],
    is_outlier: bool,
) -> Result<Vec<FeatureSample>> {
    par_map(samples, |s| {
        Ok(FeatureSample {
            features: extractor.extract(&s.image)?,
            labels: s.labels.clone(),
            is_outlier,
        })
    })
    .into_iter()
    .collect()
}

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochLoss {
    pub pal: f64,
    pub ebm_in: f64,
    pub ebm_out: f64,
    pub reg: f64,
    pub total: f64,
}

impl EpochLoss {
    fn add(&mut self, o: &EpochLoss) {
        self.pal += o.pal;
        self.ebm_in += o.ebm_in;
        self.ebm_out += o.ebm_out;
        self.reg += o.reg;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.pal *= s;
        self.ebm_in *= s;
        self.ebm_out *= s;
        self.reg *= s;
        self.total *= s;
        self
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: ClassificationHead,
    pub trace: Vec<EpochLoss>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|e| e.total)
    }
}

#[derive(Clone, Copy)]
enum Objective<'a> {
    CrossEntropy,
    Pebal(&'a LossConfig),
}

fn sample_step(
    head: &ClassificationHead,
    sample: &FeatureSample,
    objective: Objective<'_>,
) -> Result<(EpochLoss, HeadGrad)> {
    let logits = head.forward(&sample.features)?;
    let (loss, grad_logits) = match objective {
        Objective::CrossEntropy => {
            let mut g = PixelGrid::zeros(logits.height(), logits.width(), logits.depth());
            let ce = cross_entropy_loss(&logits, &sample.labels, &mut g)?;
            (
                EpochLoss {
                    pal: ce,
                    total: ce,
                    ..EpochLoss::default()
                },
                g,
            )
        }
        Objective::Pebal(config) => {
            let r = pebal_objective(&logits, &sample.labels, sample.is_outlier, config)?;
            (
                EpochLoss {
                    pal: r.pal,
                    ebm_in: r.ebm_in,
                    ebm_out: r.ebm_out,
                    reg: r.reg,
                    total: r.total,
                },
                r.grad_logits,
            )
        }
    };
    let grad = head.backward(&sample.features, &grad_logits)?;
    Ok((loss, grad))
}

/// Mean loss and mean head gradient over a batch. Per-sample work runs
/// through [`par_map`]; the reduction is sequential in batch order.
pub fn batch_gradient(
    head: &ClassificationHead,
    batch: &[&FeatureSample],
    config: Option<&LossConfig>,
) -> Result<(EpochLoss, HeadGrad)> {
    let objective = config.map_or(Objective::CrossEntropy, Objective::Pebal);
    let results = par_map(batch, |s| sample_step(head, s, objective));
    reduce_batch(head, results)
}

fn reduce_batch(
    head: &ClassificationHead,
    results: Vec<Result<(EpochLoss, HeadGrad)>>,
) -> Result<(EpochLoss, HeadGrad)> {
    let n = results.len();
    let mut loss = EpochLoss::default();
    let mut grad = HeadGrad::zeros(head.in_dim(), head.out_dim());
    for r in results {
        let (l, g) = r?;
        loss.add(&l);
        grad.add_assign(&g);
    }
    if n > 0 {
        grad.scale(1.0 / n as f64);
        loss = loss.scaled(1.0 / n as f64);
    }
    Ok((loss, grad))
}

/// Cycles through a shuffled index set, reshuffling on wrap-around.
struct Stream {
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let v = self.order[self.pos];
        self.pos += 1;
        v
    }
}

fn diverged(epoch: usize, trace: &[EpochLoss]) -> PebalError {
    PebalError::Diverged {
        epoch,
        trace: trace.iter().map(|e| e.total).collect(),
    }
}

fn run_epochs(
    mut head: ClassificationHead,
    inliers: &[FeatureSample],
    outliers: &[FeatureSample],
    config: &TrainConfig,
    loss: Option<&LossConfig>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(head.params().len(), config.learning_rate, config.adam);
    let bs = config.batch_size;
    let n_out = if outliers.is_empty() {
        0
    } else {
        ((bs as f64 * config.outlier_batch_fraction).round() as usize).min(bs)
    };
    let n_in = if inliers.is_empty() { 0 } else { bs - n_out };
    if n_in + n_out == 0 {
        return Err(PebalError::arg("no training samples"));
    }
    let total = inliers.len() + outliers.len();
    let steps = total.div_ceil(n_in + n_out);
    let mut in_stream = Stream::new(inliers.len(), &mut rng);
    let mut out_stream = Stream::new(outliers.len(), &mut rng);

    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss = EpochLoss::default();
        for _ in 0..steps {
            let mut batch: Vec<&FeatureSample> = Vec::with_capacity(n_in + n_out);
            for _ in 0..n_in {
                batch.push(&inliers[in_stream.next(&mut rng)]);
            }
            for _ in 0..n_out {
                batch.push(&outliers[out_stream.next(&mut rng)]);
            }
            let (l, g) = match batch_gradient(&head, &batch, loss) {
                Ok(v) => v,
                Err(PebalError::Numerical(_)) => return Err(diverged(epoch, &trace)),
                Err(e) => return Err(e),
            };
            if !l.total.is_finite() || g.params.iter().any(|v| !v.is_finite()) {
                return Err(diverged(epoch, &trace));
            }
            epoch_loss.add(&l);
            adam.step(head.params_mut(), &g.params);
        }
        if head.check_finite().is_err() {
            return Err(diverged(epoch, &trace));
        }
        trace.push(epoch_loss.scaled(1.0 / steps as f64));
    }
    Ok(TrainOutcome { head, trace })
}

/// Trains a `Y`-output head with per-pixel cross-entropy on pure inlier data.
pub fn pretrain_inlier(
    extractor: &FeatureExtractor,
    train: &[LabeledSample],
    num_inlier_classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.iter().any(|s| s.labels.anomaly_count() > 0) {
        return Err(PebalError::arg(
            "pretraining data must not contain anomaly labels",
        ));
    }
    let features = featurize(extractor, train, false)?;
    pretrain_on_features(
        extractor.num_filters(),
        &features,
        num_inlier_classes,
        config,
    )
}

pub fn pretrain_on_features(
    num_features: usize,
    features: &[FeatureSample],
    num_inlier_classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let head = ClassificationHead::random(num_features, num_inlier_classes, 0.01, config.seed);
    run_epochs(head, features, &[], config, None)
}

/// Extends a `Y`-output head with the abstention class and minimizes the
/// abstention objective on mixed inlier / outlier minibatches. Only the
/// head changes; the extractor is borrowed immutably.
pub fn finetune_pebal(
    extractor: &FeatureExtractor,
    head: &ClassificationHead,
    d_in: &[LabeledSample],
    d_out: &[LabeledSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let inliers = featurize(extractor, d_in, false)?;
    let outliers = featurize(extractor, d_out, true)?;
    finetune_on_features(head, &inliers, &outliers, config)
}

pub fn finetune_on_features(
    head: &ClassificationHead,
    inliers: &[FeatureSample],
    outliers: &[FeatureSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if let Some(s) = inliers.first() {
        if head.out_dim() != s.labels.num_inlier_classes() {
            return Err(PebalError::arg(format!(
                "fine-tuning expects a head with {} inlier outputs, got {}",
                s.labels.num_inlier_classes(),
                head.out_dim()
            )));
        }
    }
    run_epochs(head.extend(), inliers, outliers, config, Some(&config.loss))
}
