//! Minimal dense tensor engine: the layer set of the detector, its losses,
//! reverse-mode gradients and an Adam optimizer.

mod adam;
mod graph;
pub mod kernels;
pub mod loss;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use loss::{cross_entropy_soft, rmse_loss, smooth_distance_loss, LossValue, RegressionPenalty};
pub use tensor::{Real, Tensor};

/// Running-average momentum for batch-norm statistics: `r ← 0.9·r + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;
