//! Multimodal survival analysis toolkit.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod coxph;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod gcn;
pub mod optim;
pub mod saps;
pub mod stats;
pub mod survival;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
