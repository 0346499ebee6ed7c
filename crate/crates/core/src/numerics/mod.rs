//! Dense numeric kernel: tensors, parameters, and reverse-mode gradients.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{log_sigmoid, sigmoid, softmax_rows, Graph, Var};
pub use ops::{affine, cosine_sim, mean_pool, scaled_dot_attention, AttentionConfig};
pub use params::{uniform_init, GradStore, ParamId, ParamRegistry};
pub use tensor::Tensor2;
