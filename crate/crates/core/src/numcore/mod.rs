//! Dense float64 building blocks for the recurrent models: tensors, GRU,
//! linear and embedding layers, softmax cross-entropy, Adam and gradient
//! checking.

pub mod adam;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod loss;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use gru::{Gru, SequenceCache, StepCache};
pub use layers::{Embedding, Linear, Param, Parameterized};
pub use loss::{argmax, batch_xent, softmax, softmax_xent, Xent};
pub use tensor::Tensor;
