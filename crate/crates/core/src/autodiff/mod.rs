//! Reverse-mode differentiation, feed-forward models and optimizers.

pub mod model;
pub mod optim;
pub mod tape;

pub use model::{LayerSpec, MlpArchitecture, Mode, ParamModel, Recorded, RunningStats};
pub use optim::{OptimState, OptimizerKind};
pub use tape::{argmax, softmax_rows, BatchMoments, Gradients, Tape, Var};
