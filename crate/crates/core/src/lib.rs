pub mod autodiff;
pub mod error;
pub mod gating;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use gating::{GatingConfig, GatingVariant};
pub use model::ModelConfig;
pub use params::ParamStore;
pub use tensor::Tensor;
