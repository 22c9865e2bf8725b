//! Dense numeric kernels for the classifier: convolution, activations,
//! pooling, batch normalisation, dropout, dense layers, cross-entropy,
//! Adam and checkpoints. Every differentiable op comes as a forward
//! function plus an explicit backward that consumes the forward's inputs
//! (or cache) and the upstream gradient.

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod dropout;
mod grid;
pub(crate) mod linalg;
pub mod loss;
pub mod pool;

#[cfg(test)]
pub(crate) mod testing;

pub use activation::{elu, elu_backward};
pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{batch_norm, batch_norm_backward, BatchNorm, BatchStats, BnCache, Mode};
pub use checkpoint::Checkpoint;
pub use conv::{conv2d, conv2d_backward, ConvGrads, Padding};
pub use dense::{Dense, DenseGrads};
pub use dropout::{dropout, dropout_backward};
pub use grid::Grid;
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward, softmax_rows};
pub use pool::{avg_pool2d, avg_pool2d_backward};
