//! Report types and serialization. Every computed number is carried as a
//! named value with a provenance object; a report never contains a bare
//! number whose origin the reader would have to guess.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::AppError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportValue {
    pub name: String,
    pub value: serde_json::Value,
    /// Where the value came from: parameters, method, and any per-value
    /// diagnostics (standard errors, tail proxies, exclusion counts).
    pub provenance: serde_json::Value,
}

#[derive(Debug, Serialize)]
pub struct Refusal {
    pub kind: &'static str,
    /// Estimated and permitted work, as decimal strings (the estimate can
    /// exceed the range of a 64-bit integer).
    pub estimated: String,
    pub ceiling: String,
    pub message: String,
}

#[derive(Debug, Serialize)]
pub struct CacheStatus {
    pub enabled: bool,
    pub hit: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Timings {
    pub total_ms: u64,
    pub compute_ms: u64,
}

#[derive(Debug, Serialize)]
pub struct ExperimentReport {
    /// Tool name and version that produced the report.
    pub version: String,
    pub command: String,
    /// Echo of the effective config after flag overrides, so the report
    /// can be replayed byte-for-byte from its own header.
    pub config: ExperimentConfig,
    pub values: Vec<ReportValue>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refusal: Option<Refusal>,
    pub cache: CacheStatus,
    pub timings: Timings,
}

/// CSV escaping per RFC 4180: quote when the field contains a comma,
/// quote, or line break, doubling interior quotes.
fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn value_cell(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Fixed three-column table: `name,value,detail`. The detail column holds
/// the provenance object as compact JSON.
pub fn write_csv(path: &str, values: &[ReportValue]) -> Result<(), AppError> {
    let mut out = String::from("name,value,detail\n");
    for v in values {
        out.push_str(&format!(
            "{},{},{}\n",
            csv_escape(&v.name),
            csv_escape(&value_cell(&v.value)),
            csv_escape(&v.provenance.to_string()),
        ));
    }
    std::fs::write(Path::new(path), out)
        .map_err(|e| AppError::Validation(format!("cannot write CSV {}: {}", path, e)))
}
