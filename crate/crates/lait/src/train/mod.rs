//! Gradients, optimization and the synthetic accuracy-versus-depth experiments.

pub mod adam;
pub mod backprop;
pub mod gradcheck;
pub mod synthetic;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backprop::{forward_traced, loss, loss_and_grads, softmax_cross_entropy, Gradients};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, DEFAULT_STEP, MIN_COORDINATES};
pub use synthetic::{gen_synthetic, SyntheticDataset, SyntheticKind, SyntheticTaskSpec};
pub use trainer::{evaluate, train, Checkpoint, TrainMetrics, TrainOptions};
