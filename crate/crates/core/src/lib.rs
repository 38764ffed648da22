pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod correspondence;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod guidance;
pub mod imaging;
pub mod inference;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod transport;

pub use autograd::{Gradients, Graph, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use imaging::{Mask, RgbImage};
pub use kernels::Padding;
pub use pipeline::Pipeline;
pub use tensor::Tensor;
