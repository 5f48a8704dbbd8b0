pub mod branches;
pub mod error;
pub mod fusion;
pub mod modalities;
pub mod parsemap;
pub mod pipeline;
pub mod rng;
pub mod skeleton;
pub mod tensor;

pub use error::{Error, Result};
