//! Zero-shot cloze scoring, hard-prompt fine-tuning, soft-prefix tuning and
//! the concatenate-encode-classify baseline.

mod forward;
pub mod handle;
pub mod loss;
pub mod optim;
pub mod predict;
pub mod train;

use thiserror::Error;

pub use handle::{LinearHead, ModelHandle, ModelKind};
pub use loss::{bce_grad_logits, bce_loss, class_probs_from_logits, class_probs_from_mask, ClassProbs, PROB_EPS};
pub use optim::{scheduled_lr, AdamW};
pub use predict::{predict, read_predictions, write_predictions, zero_shot_predict, PredictFailure, Prediction};
pub use train::{
    train_baseline, train_hard_prompt, train_soft_prefix, EpochRecord, Prepared, TrainConfig, TrainReport,
    TrainedModel, Trainer,
};

use crate::backbone::BackboneError;
use crate::templates::TemplateError;

#[derive(Debug, Error)]
pub enum MethodError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("training failed at step {step}: {message}")]
    Training { step: usize, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("model handle: {0}")]
    Handle(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = MethodError> = std::result::Result<T, E>;
