//! End-to-end pipeline on the synthetic benchmark: generate, pretrain,
//! build the outlier set, fine-tune, evaluate; plus the ablation ladder.

use std::fmt::Write as _;

use crate::anomalymix::{make_outlier_set, MixOutput, MixPolicy};
use crate::error::{PebalError, Result};
use crate::grid::{LabeledSample, PixelGrid};
use crate::inference::{calibrate_threshold, predict_all, Prediction, ScoreRule};
use crate::losses::{LossConfig, PenaltyMode};
use crate::metrics::{evaluate, EvalItem, EvalReport};
use crate::model::{
    featurize, finetune_on_features, pretrain_on_features, Checkpoint, ClassificationHead,
    ExtractorConfig, FeatureExtractor, FeatureSample, TrainConfig, TrainOutcome,
};
use crate::numeric::Smoothing;
use crate::parallel::derive_seed;
use crate::scenegen::{generate_benchmark, Benchmark, BenchmarkSizes, SceneSpec, Split};

/// Number of training images used to estimate feature standardization.
pub const CALIBRATION_IMAGES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub sizes: BenchmarkSizes,
    pub extractor: ExtractorConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub mix: MixPolicy,
    pub smoothing: Smoothing,
    /// Anomaly recall at which the segmentation threshold is set on val.
    pub tpr_target: f64,
    /// Constant penalty of the fixed-penalty ablation legs.
    pub fixed_penalty: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            sizes: BenchmarkSizes::default(),
            extractor: ExtractorConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::default(),
            mix: MixPolicy::default(),
            smoothing: Smoothing::default(),
            tpr_target: 0.95,
            fixed_penalty: 4.0,
        }
    }
}

// derive_seed streams of the master seed
const STREAM_DATA: u64 = 11;
const STREAM_EXTRACTOR: u64 = 12;
const STREAM_PRETRAIN: u64 = 13;
const STREAM_MIX: u64 = 14;
const STREAM_FINETUNE: u64 = 15;

impl ExperimentConfig {
    /// Copy with every component seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.extractor.seed = derive_seed(seed, STREAM_EXTRACTOR);
        c.pretrain.seed = derive_seed(seed, STREAM_PRETRAIN);
        c.finetune.seed = derive_seed(seed, STREAM_FINETUNE);
        c
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_DATA)
    }

    pub fn mix_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_MIX)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.mix.validate()?;
        if !(self.tpr_target > 0.0 && self.tpr_target <= 1.0) {
            return Err(PebalError::arg("tpr_target must lie in (0, 1]"));
        }
        if !(self.fixed_penalty > 1.0 && self.fixed_penalty.is_finite()) {
            return Err(PebalError::arg("fixed_penalty must exceed 1"));
        }
        Ok(())
    }
}

pub fn generate_data(config: &ExperimentConfig) -> Result<Benchmark> {
    generate_benchmark(&config.scene, &config.sizes, config.data_seed())
}

fn owned(samples: Vec<&LabeledSample>) -> Vec<LabeledSample> {
    samples.into_iter().cloned().collect()
}

pub fn build_extractor(config: &ExperimentConfig, bench: &Benchmark) -> Result<FeatureExtractor> {
    let calibration: Vec<PixelGrid> = bench
        .split(Split::Train)
        .into_iter()
        .take(CALIBRATION_IMAGES)
        .map(|s| s.image.clone())
        .collect();
    FeatureExtractor::new(&config.extractor, &calibration)
}

/// AnomalyMix over the training scenes with the family-A pool.
pub fn build_outlier_set(config: &ExperimentConfig, bench: &Benchmark) -> Result<MixOutput> {
    make_outlier_set(
        &owned(bench.split(Split::Train)),
        &bench.train_pool,
        &config.mix,
        config.mix_seed(),
    )
}

/// Featurized training data shared by pretraining and every fine-tuning run.
pub struct Prepared {
    pub extractor: FeatureExtractor,
    pub inliers: Vec<FeatureSample>,
    pub outliers: Vec<FeatureSample>,
    pub mix_skipped: usize,
}

pub fn prepare(config: &ExperimentConfig, bench: &Benchmark) -> Result<Prepared> {
    config.validate()?;
    let extractor = build_extractor(config, bench)?;
    let inliers = featurize(&extractor, &owned(bench.split(Split::Train)), false)?;
    let mix = build_outlier_set(config, bench)?;
    let outliers = featurize(&extractor, &mix.samples, true)?;
    Ok(Prepared {
        extractor,
        inliers,
        outliers,
        mix_skipped: mix.skipped,
    })
}

pub fn pretrain(config: &ExperimentConfig, prepared: &Prepared) -> Result<TrainOutcome> {
    pretrain_on_features(
        prepared.extractor.num_filters(),
        &prepared.inliers,
        config.scene.num_inlier_classes as usize,
        &config.pretrain,
    )
}

pub fn finetune(
    prepared: &Prepared,
    head: &ClassificationHead,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    finetune_on_features(head, &prepared.inliers, &prepared.outliers, train)
}

/// Scores and segments one split with `rule`; `tau` drives segmentation.
pub fn predict_split(
    checkpoint: &Checkpoint,
    bench: &Benchmark,
    split: Split,
    rule: ScoreRule,
    smoothing: Smoothing,
    tau: f64,
) -> Result<Vec<Prediction>> {
    let images: Vec<&PixelGrid> = bench.split(split).into_iter().map(|s| &s.image).collect();
    predict_all(
        &checkpoint.extractor,
        &checkpoint.head,
        checkpoint.num_inlier_classes as u8,
        &images,
        rule,
        smoothing,
        tau,
    )
}

/// Threshold reaching `tpr_target` anomaly recall on the val split.
pub fn val_threshold(
    checkpoint: &Checkpoint,
    bench: &Benchmark,
    rule: ScoreRule,
    smoothing: Smoothing,
    tpr_target: f64,
) -> Result<f64> {
    let preds = predict_split(
        checkpoint,
        bench,
        Split::Val,
        rule,
        smoothing,
        f64::INFINITY,
    )?;
    let scores: Vec<PixelGrid> = preds.into_iter().map(|p| p.score).collect();
    calibrate_threshold(&scores, &bench.split(Split::Val), tpr_target)
}

pub fn report(bench: &Benchmark, split: Split, preds: &[Prediction]) -> Result<EvalReport> {
    report_filtered(bench, split, preds, |_| true)
}

/// Report over the samples of `split` accepted by `keep`.
pub fn report_filtered(
    bench: &Benchmark,
    split: Split,
    preds: &[Prediction],
    keep: impl Fn(&LabeledSample) -> bool,
) -> Result<EvalReport> {
    let samples = bench.split(split);
    let items: Vec<EvalItem<'_>> = samples
        .iter()
        .zip(preds)
        .filter(|(s, _)| keep(s))
        .map(|(s, p)| EvalItem {
            score: &p.score,
            probs: &p.probs,
            pred: &p.pred,
            gt: &s.labels,
        })
        .collect();
    evaluate(&items)
}

/// Scores a split and evaluates it, with the threshold calibrated on val.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    bench: &Benchmark,
    split: Split,
    rule: ScoreRule,
    smoothing: Smoothing,
    tpr_target: f64,
) -> Result<(EvalReport, Vec<Prediction>, f64)> {
    let tau = val_threshold(checkpoint, bench, rule, smoothing, tpr_target)?;
    let preds = predict_split(checkpoint, bench, split, rule, smoothing, tau)?;
    Ok((report(bench, split, &preds)?, preds, tau))
}

/// Inlier mIoU of the inlier-argmax segmentation on the pure-inlier scenes
/// of `split`.
pub fn inlier_miou(checkpoint: &Checkpoint, bench: &Benchmark, split: Split) -> Result<f64> {
    let preds = predict_split(
        checkpoint,
        bench,
        split,
        ScoreRule::Energy,
        Smoothing::NONE,
        f64::INFINITY,
    )?;
    let r = report_filtered(bench, split, &preds, |s| s.labels.anomaly_count() == 0)?;
    if r.miou.is_nan() {
        return Err(PebalError::UndefinedMetric {
            metric: "miou",
            reason: "split has no pure-inlier scenes".into(),
        });
    }
    Ok(r.miou)
}

/// Mean score over anomaly-labeled and inlier-labeled pixels of a split.
pub fn score_gap(bench: &Benchmark, split: Split, preds: &[Prediction]) -> (f64, f64) {
    let (mut sa, mut na, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for (s, p) in bench.split(split).iter().zip(preds) {
        for (&l, &v) in s.labels.as_slice().iter().zip(p.score.as_slice()) {
            if s.labels.is_anomaly(l) {
                sa += v;
                na += 1;
            } else if s.labels.is_inlier(l) {
                si += v;
                ni += 1;
            }
        }
    }
    (sa / na.max(1) as f64, si / ni.max(1) as f64)
}

/// Everything one default run produces.
pub struct RunResult {
    pub bench: Benchmark,
    pub pretrained: Checkpoint,
    pub finetuned: Checkpoint,
    pub pretrain_trace: TrainOutcome,
    pub finetune_trace: TrainOutcome,
    pub mix_skipped: usize,
}

/// Generate, pretrain and fine-tune with the experiment defaults.
pub fn run(config: &ExperimentConfig) -> Result<RunResult> {
    let bench = generate_data(config)?;
    let prepared = prepare(config, &bench)?;
    let pre = pretrain(config, &prepared)?;
    let fine = finetune(&prepared, &pre.head, &config.finetune)?;
    let y = config.scene.num_inlier_classes as usize;
    Ok(RunResult {
        pretrained: Checkpoint::new(prepared.extractor.clone(), pre.head.clone(), y)?,
        finetuned: Checkpoint::new(prepared.extractor.clone(), fine.head.clone(), y)?,
        pretrain_trace: pre,
        finetune_trace: fine,
        mix_skipped: prepared.mix_skipped,
        bench,
    })
}

/// Rungs of the ablation ladder, weakest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationLeg {
    /// Cross-entropy with an extra anomaly class.
    CeOodClass,
    /// Abstention with a constant penalty.
    FixedPenalty,
    /// Constant penalty plus energy hinges.
    FixedPenaltyEbm,
    /// Adaptive penalty plus energy hinges, no regularizer.
    AdaptiveNoReg,
    /// Full objective.
    Full,
}

impl AblationLeg {
    pub const ALL: [AblationLeg; 5] = [
        AblationLeg::CeOodClass,
        AblationLeg::FixedPenalty,
        AblationLeg::FixedPenaltyEbm,
        AblationLeg::AdaptiveNoReg,
        AblationLeg::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationLeg::CeOodClass => "ce_ood_class",
            AblationLeg::FixedPenalty => "fixed_penalty_al",
            AblationLeg::FixedPenaltyEbm => "fixed_penalty_al_ebm",
            AblationLeg::AdaptiveNoReg => "adaptive_pal_ebm",
            AblationLeg::Full => "full",
        }
    }

    /// The leg's loss, derived from the configured full loss.
    pub fn loss(self, full: &LossConfig, fixed_penalty: f64) -> LossConfig {
        let no_reg = LossConfig {
            beta1: 0.0,
            beta2: 0.0,
            ..*full
        };
        match self {
            AblationLeg::CeOodClass => LossConfig {
                penalty: PenaltyMode::CrossEntropy,
                lambda: 0.0,
                ..no_reg
            },
            AblationLeg::FixedPenalty => LossConfig {
                penalty: PenaltyMode::Fixed(fixed_penalty),
                lambda: 0.0,
                ..no_reg
            },
            AblationLeg::FixedPenaltyEbm => LossConfig {
                penalty: PenaltyMode::Fixed(fixed_penalty),
                ..no_reg
            },
            AblationLeg::AdaptiveNoReg => LossConfig {
                penalty: PenaltyMode::Adaptive,
                ..no_reg
            },
            AblationLeg::Full => *full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub leg: AblationLeg,
    pub seed: u64,
    pub result: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub fixed_penalty: f64,
    pub cells: Vec<AblationCell>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl AblationTable {
    /// Successful reports of one leg, in seed order.
    pub fn reports(&self, leg: AblationLeg) -> Vec<&EvalReport> {
        self.cells
            .iter()
            .filter(|c| c.leg == leg)
            .filter_map(|c| c.result.as_ref().ok())
            .collect()
    }

    /// Mean and sample standard deviation of `metric` for a leg, or `None`
    /// when every seed of the leg failed.
    pub fn summary(
        &self,
        leg: AblationLeg,
        metric: impl Fn(&EvalReport) -> f64,
    ) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.reports(leg).into_iter().map(metric).collect();
        (!v.is_empty()).then(|| mean_sd(&v))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# fixed penalty a = {}", self.fixed_penalty).expect("string write");
        s.push_str(
            "config\tseeds\tauroc_mean\tauroc_sd\tap_mean\tap_sd\tfpr95_mean\tfpr95_sd\tstatus\n",
        );
        for leg in AblationLeg::ALL {
            let total = self.cells.iter().filter(|c| c.leg == leg).count();
            let ok = self.reports(leg).len();
            let status = if ok == total {
                "ok".to_string()
            } else {
                let errors: Vec<&str> = self
                    .cells
                    .iter()
                    .filter(|c| c.leg == leg)
                    .filter_map(|c| c.result.as_ref().err().map(String::as_str))
                    .collect();
                format!("failed {}/{}: {}", total - ok, total, errors.join("; "))
            };
            let cols: Vec<String> = [
                self.summary(leg, |r| r.auroc),
                self.summary(leg, |r| r.ap),
                self.summary(leg, |r| r.fpr95),
            ]
            .into_iter()
            .flat_map(|m| match m {
                Some((a, b)) => [format!("{a:.6}"), format!("{b:.6}")],
                None => ["nan".to_string(), "nan".to_string()],
            })
            .collect();
            writeln!(s, "{}\t{ok}\t{}\t{status}", leg.name(), cols.join("\t"))
                .expect("string write");
        }
        s
    }
}

/// Runs every ablation leg for every seed, generating a fresh benchmark per
/// seed. All legs of a seed share the benchmark, the outlier set and the
/// pretrained head, and all are scored with the smoothed energy on the test
/// split. A failing leg is recorded and the others still run.
pub fn run_ablation(config: &ExperimentConfig, seeds: &[u64]) -> Result<AblationTable> {
    let mut cells = Vec::new();
    for &seed in seeds {
        let cfg = config.with_seed(seed);
        let bench = generate_data(&cfg)?;
        cells.extend(ablation_seed(&cfg, &bench)?);
    }
    Ok(AblationTable {
        fixed_penalty: config.fixed_penalty,
        cells,
    })
}

/// [`run_ablation`] on one fixed benchmark; seeds vary the extractor, the
/// outlier set and training.
pub fn run_ablation_on(
    config: &ExperimentConfig,
    bench: &Benchmark,
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut cells = Vec::new();
    for &seed in seeds {
        cells.extend(ablation_seed(&config.with_seed(seed), bench)?);
    }
    Ok(AblationTable {
        fixed_penalty: config.fixed_penalty,
        cells,
    })
}

fn ablation_seed(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<Vec<AblationCell>> {
    let prepared = prepare(cfg, bench)?;
    let pre = pretrain(cfg, &prepared)?;
    let mut cells = Vec::new();
    for leg in AblationLeg::ALL {
        let train = TrainConfig {
            loss: leg.loss(&cfg.finetune.loss, cfg.fixed_penalty),
            ..cfg.finetune
        };
        let result = finetune(&prepared, &pre.head, &train)
            .and_then(|fine| {
                let ck = Checkpoint::new(
                    prepared.extractor.clone(),
                    fine.head,
                    cfg.scene.num_inlier_classes as usize,
                )?;
                evaluate_checkpoint(
                    &ck,
                    bench,
                    Split::Test,
                    ScoreRule::Pebal,
                    cfg.smoothing,
                    cfg.tpr_target,
                )
            })
            .map(|(r, _, _)| r)
            .map_err(|e| e.to_string());
        cells.push(AblationCell {
            leg,
            seed: cfg.seed,
            result,
        });
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            sizes: BenchmarkSizes {
                train: 4,
                val: 2,
                test: 2,
                train_objects: 4,
                test_objects: 4,
            },
            ..ExperimentConfig::default()
        };
        c.scene.height = 24;
        c.scene.width = 24;
        c.extractor.num_filters = 8;
        c.pretrain.epochs = 2;
        c.finetune.epochs = 2;
        c.finetune.batch_size = 4;
        c.pretrain.batch_size = 4;
        c
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let c = tiny();
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.finetuned, b.finetuned);
        assert_eq!(a.finetune_trace.trace.len(), 2);
        assert!(a.finetuned.has_abstention());
    }

    #[test]
    fn ablation_legs_configure_losses() {
        let full = LossConfig::default();
        let ce = AblationLeg::CeOodClass.loss(&full, 4.0);
        assert_eq!(
            (ce.penalty, ce.lambda, ce.beta1),
            (PenaltyMode::CrossEntropy, 0.0, 0.0)
        );
        assert_eq!(
            AblationLeg::FixedPenalty.loss(&full, 4.0).penalty,
            PenaltyMode::Fixed(4.0)
        );
        assert_eq!(
            AblationLeg::FixedPenaltyEbm.loss(&full, 4.0).lambda,
            full.lambda
        );
        let d = AblationLeg::AdaptiveNoReg.loss(&full, 4.0);
        assert_eq!((d.penalty, d.beta2), (PenaltyMode::Adaptive, 0.0));
        assert_eq!(AblationLeg::Full.loss(&full, 4.0), full);
    }

    #[test]
    fn tiny_ablation_table_has_every_row() {
        let t = run_ablation(&tiny(), &[1]).unwrap();
        assert_eq!(t.cells.len(), 5);
        let tsv = t.to_tsv();
        assert!(tsv.starts_with("# fixed penalty a = 4\n"));
        assert_eq!(tsv.lines().count(), 2 + 5);
    }
}
