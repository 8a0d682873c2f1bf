//! Small shared helpers: full-precision float formatting and CSV writing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Formats a float with 17 significant digits, enough for an exact
/// round trip through text.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    format!("{v:.16e}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    fs::write(path, out)
}
