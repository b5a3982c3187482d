pub mod adaptive;
pub mod autodiff;
pub mod cells;
pub mod config;
pub mod error;
pub mod harness;
pub mod model;
pub mod training;
pub mod tasks;

pub use error::{Error, Result};
