pub mod autograd;
pub mod checkpoint;
pub mod dissociation;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod importance;
pub mod model;
pub mod report;
pub mod selfcheck;
pub mod similarity;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
