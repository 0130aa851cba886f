//! Design-based estimation for stratified and cluster-randomized experiments.

pub mod covadj;
pub mod datasets;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod randomize;
pub mod simulate;
pub mod variance;

pub use error::{Error, Result};
