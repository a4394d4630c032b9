//! Small reverse-mode differentiation kernel: 2-D tensors, a recording tape,
//! dense and LSTM layers, Adam, finite-difference checks and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Activation, Dense, Lstm, Mlp};
pub use params::{ParamId, ParamStore};
pub use tape::{log_sigmoid, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
