//! Numerical core: `f64` tensors, a small reverse-mode tape, dense layers,
//! the Adam optimizer, seeded RNG streams and the binary checkpoint format.
//!
//! Kernels are single-threaded and deterministic: the same inputs and
//! parameters always give bit-identical results.

pub mod adam;
pub mod checkpoint;
pub mod dense;
pub mod error;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::AdamState;
pub use checkpoint::{checkpoint_from_bytes, checkpoint_bytes, checkpoint_load, checkpoint_save, CheckpointMeta};
pub use dense::{dense_forward, mlp_forward, Activation, DenseLayer, Init, Mlp};
pub use error::{NumericsError, Result};
pub use graph::{Graph, Var};
pub use params::{Param, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
