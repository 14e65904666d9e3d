pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ias;
pub mod imageops;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod pmi;
pub mod search_space;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
