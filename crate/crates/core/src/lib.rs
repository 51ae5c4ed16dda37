pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod run;
pub mod training;

pub use error::{Error, Result};
