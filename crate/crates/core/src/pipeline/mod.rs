//! Everything between a config file and a trained model: configuration
//! parsing, synthetic scene generation, the training loop, and inference
//! post-processing.

pub mod config;
pub mod infer;
pub mod scene;
pub mod train;

pub use config::{EnsembleMode, TrainConfig};
pub use infer::{detect, InferConfig};
pub use scene::{gen_scene, SceneConfig, SyntheticScene};
pub use train::{train, train_with_progress, MetricsRow, TrainOutcome};
