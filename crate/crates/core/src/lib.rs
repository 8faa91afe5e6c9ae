pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{Graph, Gradients, Tensor, Var};
