pub mod bagstore;
pub mod config;
pub mod error;
pub mod iqgm;
pub mod mdm;
pub mod memloss;
pub mod nnprims;
pub mod trainer;

pub use error::{Error, Result};
