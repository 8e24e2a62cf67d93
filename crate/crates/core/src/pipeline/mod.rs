//! Both training stages, the optimiser, batch sampling and evaluation glue.

mod ablation;
mod config;
mod model;
mod optim;
mod sampler;
mod train;

pub use config::{EvalConfig, LrSchedule, ModelConfig, PipelineConfig, RetrievalFeature, Stage1Config, Stage2Config, TrainMode};
pub use model::{Batch, FeatureKind, Model, ALIGN, CLASSIFIER, PFU, SGTM, SKELETON, VISUAL};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use sampler::PkSampler;
pub use train::{Session, Stage2Terms, TrainLog, BANK_SKELETON, BANK_VISUAL};
pub use ablation::{run_ablation, AblationReport, AblationRun, AblationSummary, Variant, TREND_TOLERANCE};
