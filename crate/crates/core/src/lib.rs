pub mod attribution;
pub mod attack;
pub mod autodiff;
pub mod criteria;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nn::{Activation, LayerSpec, Network};
pub use tensor::Tensor;
