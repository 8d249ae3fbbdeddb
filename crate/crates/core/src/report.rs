//! Versioned analysis reports and the per-spectrum p-value table.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::gof::{Algorithm, GofResult};
use crate::model::ModelConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// The run configuration as given on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEcho {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmf: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arf: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<Algorithm>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(rename = "B1", default, skip_serializing_if = "Option::is_none")]
    pub b1: Option<usize>,
    #[serde(rename = "B2", default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub software_version: String,
    pub config: ConfigEcho,
    pub fit: FitResult,
    pub gof: Vec<GofResult>,
    /// SHA-256 of the cumulant table, or `None` for direct summation.
    pub table_checksum: Option<String>,
}

impl AnalysisReport {
    pub fn new(config: ConfigEcho, fit: FitResult, gof: Vec<GofResult>, table_checksum: Option<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            software_version: SOFTWARE_VERSION.to_owned(),
            config,
            fit,
            gof,
            table_checksum,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Strict read: unknown fields and other schema versions are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "report schema version {} is not supported (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn p_value(&self, algorithm: Algorithm) -> Option<f64> {
        self.gof.iter().find(|g| g.algorithm == algorithm).map(|g| g.p_value)
    }
}

/// One row per spectrum: `spectrum,statistic,<p-value per method>`.
/// Methods missing from a report leave an empty cell.
pub fn write_pvalue_table<W: Write>(rows: &[(String, AnalysisReport)], w: W) -> Result<()> {
    let mut methods: Vec<Algorithm> = rows
        .iter()
        .flat_map(|(_, r)| r.gof.iter().map(|g| g.algorithm))
        .collect();
    methods.sort();
    methods.dedup();
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["spectrum".to_owned(), "statistic".to_owned()];
    header.extend(methods.iter().map(|m| m.label().to_owned()));
    wtr.write_record(&header)?;
    for (name, r) in rows {
        let mut rec = vec![name.clone(), r.fit.c_min.to_string()];
        rec.extend(
            methods
                .iter()
                .map(|&m| r.p_value(m).map(|p| p.to_string()).unwrap_or_default()),
        );
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
