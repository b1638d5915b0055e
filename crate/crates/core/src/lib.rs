//! EfficientNet-family chest X-ray classifiers built from scratch: compound
//! scaling and cost accounting, a small autodiff engine, weight files with
//! transfer learning, dataset assembly, flat and hierarchical prediction,
//! training and evaluation.

pub mod arch;
pub mod classify;
pub mod data;
pub mod error;
pub mod eval;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
