//! Metric-embedding learning for person re-identification over
//! pre-extracted feature vectors.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod mining;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod trainer;

pub use data::{
    build_cooccurrence, generate_synthetic, load_features, save_features, CameraId,
    CooccurrenceIndex, CooccurrenceScope, Dataset, DatasetId, PersonId, Sample, SynthConfig,
    TrackletId, TrackletInfo,
};
pub use error::{Error, Result};
pub use eval::{cmc_map, evaluate_model, EvalMeta, EvalReport, Exclusion, ProtocolConfig};
pub use losses::{
    batch_hard_loss, full_triplet_loss, modified_batch_hard_loss, LossResult, MarginMode, Reduction,
};
pub use mining::{MinedPair, MinedPairSet, MiningConfig, PairSelection};
pub use model::{load_checkpoint, save_checkpoint, Mode, Model, ModelConfig};
pub use optim::{LrSchedule, Optimizer};
pub use sampler::{BatchLayout, BatchSource, SwitchPolicy};
pub use trainer::{
    finetune, finetune_two_stage, mine_target, train, FinetuneConfig, MiningReport, TrainConfig,
    TrainLog, TrainMode,
};
