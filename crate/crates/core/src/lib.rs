pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod patchify;
pub mod profile;
pub mod tensor;
pub mod tiling;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
