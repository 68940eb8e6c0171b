//! Training, evaluation, inference, ablation and visualization entry
//! points.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod infer;
pub mod optim;
pub mod train;
pub mod visualize;

pub use ablate::{ablation_run, AblationReport, AblationRow};
pub use config::{AdamConfig, EvalConfig, TrainConfig};
pub use eval::{activation_contrast, evaluate, evaluate_samples, ActivationStat, Evaluation};
pub use infer::{infer, infer_arrays, read_pose, InferFiles};
pub use optim::Adam;
pub use train::{train, train_on, TrainLog, TrainOutcome};
pub use visualize::{visualize, visualize_sample};
