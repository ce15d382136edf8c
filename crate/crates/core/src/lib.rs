//! Two-tower contrastive embedding learning with EMA self-distillation.
//!
//! The library trains an image tower and a text tower on paired feature
//! vectors with a symmetric InfoNCE loss plus a KL term that pulls the
//! student's matching distributions toward those of an exponential moving
//! average teacher. Trained models are evaluated by zero-shot nearest-label
//! retrieval.

pub mod commands;
pub mod config;
pub mod data;
mod ddouble;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor_io;
pub mod train;
pub mod zeroshot;

pub use error::{Error, Result};
pub use losses::{combined_loss, infonce_loss, kl_distillation_loss, LossOptions, LossReport};
pub use math::Matrix;
pub use model::{ema_update, init_model, Activation, EmaTeacher, ModelConfig, TwoTowerModel};
pub use optim::{sgd_step, CosineSchedule, SgdState};
pub use train::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};
pub use zeroshot::{evaluate, EvalResult, PromptTemplate};
