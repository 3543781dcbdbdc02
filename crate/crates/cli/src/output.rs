//! Output files: CSVs with round-trip-exact reals, atomic writes, and the
//! run record.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// 17 significant digits; re-reading reproduces the f64 exactly.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write via a temporary name in the same directory and rename into place,
/// so an interrupted run never leaves a truncated file under the final name.
pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let final_path = dir.join(name);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, &final_path)
        .with_context(|| format!("renaming into {}", final_path.display()))?;
    Ok(final_path)
}

/// Comma-separated table with a header row.
pub struct Csv {
    lines: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &str) -> Csv {
        Csv {
            lines: format!("{header}\n"),
            columns: header.split(',').count(),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "CSV row width mismatch");
        self.lines.push_str(&fields.join(","));
        self.lines.push('\n');
    }

    pub fn contents(&self) -> &str {
        &self.lines
    }
}
