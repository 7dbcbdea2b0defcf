pub mod autodiff;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod mil;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pyramid;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
