pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod mi;
pub mod models;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamVector = models::ParamVector<f64>;
pub type TwoBranchModel = models::TwoBranchModel<f64>;
pub type SingleBranchModel = models::SingleBranchModel<f64>;
