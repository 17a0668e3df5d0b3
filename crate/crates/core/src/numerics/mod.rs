//! Dense networks, losses, reverse-mode gradients and Adam.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
mod net;

pub use adam::{adam_update, AdamConfig, AdamState, LrSchedule};
pub use loss::{cross_entropy, kl_diag_gaussian, mse, CE_FLOOR};
pub use net::{sigmoid, softmax, Activation, DenseNet, GradTape, Gradients, Layer, LayerGrad};
