pub mod basis;
pub mod control;
pub mod error;
pub mod experiment;
pub mod kmeans;
mod linalg;
pub mod matfile;
pub mod plant;
pub mod qp;
pub mod regress;
pub mod signal;

pub use error::{Error, Result};
