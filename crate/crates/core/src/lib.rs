pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod modality;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod system;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
