//! Initialisation, loss, optimiser, schedule and the training loop.

mod eval;
mod init;
mod loss;
mod optim;
mod train;

pub use eval::{evaluate, evaluate_detailed, EvalOptions, EvalReport, ImageEval};
pub use init::he_uniform_init;
pub use loss::{class_weights, combo_loss, LossOptions};
pub use optim::Adam;
pub use train::{lr_at, restore, train, LogRow, TrainConfig, TrainEvent, TrainOutcome, TrainState};
