//! Dense `f64` reverse-mode autodiff, Adam, dropout, seeded RNG and
//! checkpoint I/O. Everything model-related is built on this module.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod paramstore;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{log_softmax, softmax_into, DropoutMask, Graph, Op, Var};
pub use paramstore::ParamStore;
pub use rng::{mix_seed, tag, Rng};
pub use tensor::ParamTensor;
