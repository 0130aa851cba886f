//! Datasets bundled with the crate.

use crate::error::{Error, Result};
use crate::experiment::ExperimentData;
use crate::io::parse_cluster_csv;

/// Ten matched pairs of child-care sites from a nutrition trial: site size
/// (children enrolled) and change in daily water served per child, in ounces,
/// rounded to two decimals.
pub const OSNAP_CSV: &str = include_str!("../datasets/osnap.csv");

pub const NAMES: &[&str] = &["osnap"];

pub fn csv_text(name: &str) -> Result<&'static str> {
    match name {
        "osnap" => Ok(OSNAP_CSV),
        other => Err(Error::ConfigError(format!(
            "unknown dataset {other:?}; available: {}",
            NAMES.join(", ")
        ))),
    }
}

pub fn load(name: &str) -> Result<ExperimentData> {
    parse_cluster_csv(csv_text(name)?.as_bytes())
}

pub fn osnap() -> ExperimentData {
    load("osnap").expect("bundled dataset parses")
}
