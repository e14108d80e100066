//! File emission helpers: CSV tables, JSON documents, and content hashes.
//!
//! Every CSV schema written here is fixed and documented in the README;
//! downstream plotting reads these files, never the program's log output.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::CliError;

pub fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Usage(format!("cannot serialize {}: {e}", path.display())))?;
    body.push('\n');
    write_text(path, &body)
}

/// Builds a CSV file from a header and preformatted rows.
pub fn csv_table(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut body = String::from(header);
    body.push('\n');
    for row in rows {
        body.push_str(&row);
        body.push('\n');
    }
    body
}

/// Empty cell for absent optional metrics.
pub fn opt_cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Content hash of a written artifact, `sha256:<hex>`.
pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("sha256:{:x}", hasher.finalize()))
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}
