pub mod data;
pub mod error;
pub mod estimators;
pub mod learners;
pub mod ocsvm;
pub mod runner;
pub mod seed;
pub mod simgen;
pub mod uncertainty;

pub use error::{Error, Result};
