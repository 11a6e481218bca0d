pub mod analysis;
pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod models;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
