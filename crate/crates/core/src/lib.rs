pub mod data;
pub mod error;
pub mod experiment;
pub mod lens;
pub mod probe;
pub mod report;
pub mod store;
pub mod toylm;

pub use error::{Error, Result};
