pub mod config;
pub mod data;
pub mod error;
pub mod fit;
pub mod jet;
pub mod laplace;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod simulate;
pub mod sparse;
pub mod spline;
pub mod validation;

pub use error::{Error, Result};
