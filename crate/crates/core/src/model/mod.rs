//! Frozen feature extractor plus trainable classification head.

mod checkpoint;
mod extractor;
mod head;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use extractor::{ExtractorConfig, FeatureExtractor};
pub use head::{ClassificationHead, HeadGrad};
pub use optim::{Adam, AdamParams};
pub use train::{
    batch_gradient, featurize, finetune_on_features, finetune_pebal, pretrain_inlier,
    pretrain_on_features, EpochLoss, FeatureSample, TrainConfig, TrainOutcome,
};
