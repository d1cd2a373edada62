//! Parallel-block vision transformer with QK normalization, a deterministic
//! simulator of its 2D-mesh model-parallel execution, and toy-scale training.

pub mod error;
pub mod gradcheck;
pub mod mesh;
pub mod model;
pub mod rng;
pub mod shard;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
