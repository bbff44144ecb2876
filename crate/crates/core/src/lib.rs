pub mod bench;
pub mod data;
pub mod error;
pub mod grad;
pub mod matrix;
pub mod scw;
pub mod sketch;
pub mod svd;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
