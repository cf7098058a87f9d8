pub mod aslmask;
pub mod autodiff;
pub mod error;
pub mod features;
pub mod harness;
pub mod mixops;
pub mod models;
pub mod ssl_objective;
pub mod synthdata;

pub use error::{Error, Result};
