//! Training engine for studying points of extreme overfitting ("sad points"):
//! weights that fit the training set almost perfectly while getting the test
//! set almost entirely wrong.
//!
//! Modules, bottom-up: [`tensor`] (dense f64 arrays and kernels), [`nn`]
//! (layers, loss, initialization), [`optim`] (SGD and Adam), [`data`]
//! (loaders, label corruption, batching) and [`experiment`] (training loops,
//! sad-point construction, escape runs, persistence and analysis).

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
