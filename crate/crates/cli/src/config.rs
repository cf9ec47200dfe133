//! Run configuration file.
//!
//! Flat `section.key = value` lines (TOML dotted keys), `#` comments.
//! Every key is optional and defaults to the library default; unknown keys
//! are rejected.

use std::path::Path;

use pebal::anomalymix::MixPolicy;
use pebal::experiment::ExperimentConfig;
use pebal::losses::{EbmMasking, LossConfig, PenaltyMode};
use pebal::model::{AdamParams, TrainConfig};
use pebal::numeric::Smoothing;
use pebal::scenegen::{Layout, SceneSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: u64,
    pub scene: SceneSection,
    pub data: DataSection,
    pub extractor: ExtractorSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub loss: LossSection,
    pub mix: MixSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub height: usize,
    pub width: usize,
    pub num_inlier_classes: u8,
    pub noise_sigma: f64,
    pub palette: Vec<[f64; 3]>,
    pub horizon: (f64, f64),
    pub building_height: (f64, f64),
    pub building_width: (usize, usize),
    pub gap_probability: f64,
    pub road_center_offset: (f64, f64),
    pub road_top_half_width: (f64, f64),
    pub road_bottom_half_width: (f64, f64),
    pub line_width: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub train_objects: usize,
    pub test_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub num_filters: usize,
    pub kernel_size: usize,
    pub color_frequency: f64,
}

macro_rules! train_section {
    ($name:ident, $default:expr) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            pub epochs: usize,
            pub batch_size: usize,
            pub learning_rate: f64,
            pub adam_beta_m: f64,
            pub adam_beta_v: f64,
            pub adam_epsilon: f64,
            pub outlier_batch_fraction: f64,
        }

        impl Default for $name {
            fn default() -> Self {
                Self::from_config(&$default)
            }
        }

        impl $name {
            fn from_config(t: &TrainConfig) -> Self {
                Self {
                    epochs: t.epochs,
                    batch_size: t.batch_size,
                    learning_rate: t.learning_rate,
                    adam_beta_m: t.adam.beta_m,
                    adam_beta_v: t.adam.beta_v,
                    adam_epsilon: t.adam.epsilon,
                    outlier_batch_fraction: t.outlier_batch_fraction,
                }
            }

            fn to_config(&self, loss: LossConfig) -> TrainConfig {
                TrainConfig {
                    epochs: self.epochs,
                    batch_size: self.batch_size,
                    learning_rate: self.learning_rate,
                    adam: AdamParams {
                        beta_m: self.adam_beta_m,
                        beta_v: self.adam_beta_v,
                        epsilon: self.adam_epsilon,
                    },
                    seed: 0,
                    loss,
                    outlier_batch_fraction: self.outlier_batch_fraction,
                }
            }
        }
    };
}

train_section!(PretrainSection, TrainConfig::pretrain_default());
train_section!(FinetuneSection, TrainConfig::default());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyName {
    Adaptive,
    Fixed,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingName {
    ByLabel,
    ByImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub m_in: f64,
    pub m_out: f64,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub a_min: f64,
    pub penalty: PenaltyName,
    /// Constant penalty for `penalty = "fixed"` and the fixed-penalty
    /// ablation legs.
    pub fixed_penalty: f64,
    pub ebm_masking: MaskingName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub scale_range: (f64, f64),
    pub allow_hflip: bool,
    pub max_paste_attempts: usize,
    pub paste_per_image: (usize, usize),
    pub probability: f64,
    pub max_anomaly_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub kernel_size: usize,
    pub sigma: f64,
    pub tpr_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from_experiment(&ExperimentConfig::default(), &[0, 1, 2])
    }
}

macro_rules! section_default {
    ($($t:ty => $field:ident),*) => {
        $(impl Default for $t {
            fn default() -> Self {
                ConfigFile::default().$field
            }
        })*
    };
}
section_default!(
    SceneSection => scene,
    DataSection => data,
    ExtractorSection => extractor,
    LossSection => loss,
    MixSection => mix,
    EvalSection => eval,
    AblateSection => ablate
);

impl ConfigFile {
    pub fn from_experiment(c: &ExperimentConfig, ablation_seeds: &[u64]) -> Self {
        let l = &c.scene.layout;
        let loss = &c.finetune.loss;
        Self {
            seed: c.seed,
            scene: SceneSection {
                height: c.scene.height,
                width: c.scene.width,
                num_inlier_classes: c.scene.num_inlier_classes,
                noise_sigma: c.scene.noise_sigma,
                palette: c.scene.palette.clone(),
                horizon: l.horizon,
                building_height: l.building_height,
                building_width: l.building_width,
                gap_probability: l.gap_probability,
                road_center_offset: l.road_center_offset,
                road_top_half_width: l.road_top_half_width,
                road_bottom_half_width: l.road_bottom_half_width,
                line_width: l.line_width,
            },
            data: DataSection {
                train: c.sizes.train,
                val: c.sizes.val,
                test: c.sizes.test,
                train_objects: c.sizes.train_objects,
                test_objects: c.sizes.test_objects,
            },
            extractor: ExtractorSection {
                num_filters: c.extractor.num_filters,
                kernel_size: c.extractor.kernel_size,
                color_frequency: c.extractor.color_frequency,
            },
            pretrain: PretrainSection::from_config(&c.pretrain),
            finetune: FinetuneSection::from_config(&c.finetune),
            loss: LossSection {
                m_in: loss.m_in,
                m_out: loss.m_out,
                lambda: loss.lambda,
                beta1: loss.beta1,
                beta2: loss.beta2,
                a_min: loss.a_min,
                penalty: match loss.penalty {
                    PenaltyMode::Adaptive => PenaltyName::Adaptive,
                    PenaltyMode::Fixed(_) => PenaltyName::Fixed,
                    PenaltyMode::CrossEntropy => PenaltyName::CrossEntropy,
                },
                fixed_penalty: match loss.penalty {
                    PenaltyMode::Fixed(a) => a,
                    _ => c.fixed_penalty,
                },
                ebm_masking: match loss.ebm_masking {
                    EbmMasking::ByLabel => MaskingName::ByLabel,
                    EbmMasking::ByImage => MaskingName::ByImage,
                },
            },
            mix: MixSection {
                scale_range: c.mix.scale_range,
                allow_hflip: c.mix.allow_hflip,
                max_paste_attempts: c.mix.max_paste_attempts,
                paste_per_image: c.mix.paste_per_image,
                probability: c.mix.mix_probability,
                max_anomaly_fraction: c.mix.max_anomaly_fraction,
            },
            eval: EvalSection {
                kernel_size: c.smoothing.kernel_size,
                sigma: c.smoothing.sigma,
                tpr_target: c.tpr_target,
            },
            ablate: AblateSection {
                seeds: ablation_seeds.to_vec(),
            },
        }
    }

    /// The experiment this file describes, with component seeds derived from
    /// the master seed.
    pub fn to_experiment(&self) -> ExperimentConfig {
        let s = &self.scene;
        let l = &self.loss;
        let loss = LossConfig {
            m_in: l.m_in,
            m_out: l.m_out,
            lambda: l.lambda,
            beta1: l.beta1,
            beta2: l.beta2,
            a_min: l.a_min,
            penalty: match l.penalty {
                PenaltyName::Adaptive => PenaltyMode::Adaptive,
                PenaltyName::Fixed => PenaltyMode::Fixed(l.fixed_penalty),
                PenaltyName::CrossEntropy => PenaltyMode::CrossEntropy,
            },
            ebm_masking: match l.ebm_masking {
                MaskingName::ByLabel => EbmMasking::ByLabel,
                MaskingName::ByImage => EbmMasking::ByImage,
            },
        };
        let base = ExperimentConfig::default();
        let config = ExperimentConfig {
            seed: self.seed,
            scene: SceneSpec {
                height: s.height,
                width: s.width,
                num_inlier_classes: s.num_inlier_classes,
                noise_sigma: s.noise_sigma,
                palette: s.palette.clone(),
                layout: Layout {
                    horizon: s.horizon,
                    building_height: s.building_height,
                    building_width: s.building_width,
                    gap_probability: s.gap_probability,
                    road_center_offset: s.road_center_offset,
                    road_top_half_width: s.road_top_half_width,
                    road_bottom_half_width: s.road_bottom_half_width,
                    line_width: s.line_width,
                },
            },
            sizes: pebal::scenegen::BenchmarkSizes {
                train: self.data.train,
                val: self.data.val,
                test: self.data.test,
                train_objects: self.data.train_objects,
                test_objects: self.data.test_objects,
            },
            extractor: pebal::model::ExtractorConfig {
                num_filters: self.extractor.num_filters,
                kernel_size: self.extractor.kernel_size,
                color_frequency: self.extractor.color_frequency,
                ..base.extractor
            },
            pretrain: self.pretrain.to_config(loss),
            finetune: self.finetune.to_config(loss),
            mix: MixPolicy {
                scale_range: self.mix.scale_range,
                allow_hflip: self.mix.allow_hflip,
                max_paste_attempts: self.mix.max_paste_attempts,
                paste_per_image: self.mix.paste_per_image,
                mix_probability: self.mix.probability,
                max_anomaly_fraction: self.mix.max_anomaly_fraction,
                anchor: None,
            },
            smoothing: Smoothing {
                kernel_size: self.eval.kernel_size,
                sigma: self.eval.sigma,
            },
            tpr_target: self.eval.tpr_target,
            fixed_penalty: l.fixed_penalty,
        };
        config.with_seed(self.seed)
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, ConfigError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            line: e.span().map_or(0, |s| {
                text[..s.start.min(text.len())].matches('\n').count() + 1
            }),
            reason: e.message().to_string(),
        })?;
        file.check(path)?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Library-level validation of the assembled configuration.
    pub fn check(&self, path: &str) -> Result<(), ConfigError> {
        let invalid = |reason: String| ConfigError::Invalid {
            path: path.to_string(),
            reason,
        };
        let c = self.to_experiment();
        c.validate().map_err(|e| invalid(e.to_string()))?;
        c.finetune
            .loss
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if self.ablate.seeds.is_empty() {
            return Err(invalid("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Canonical text of the effective configuration.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
