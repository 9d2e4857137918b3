//! Report writers: JSON documents, JSON-lines streams and two-column TSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn to_line<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string(value).map_err(|e| CliError::Internal(e.to_string()))
}

/// One JSON document followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = to_line(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// JSON-lines stream: a `{"provenance": ...}` line, then one line per row.
pub fn write_stream<T: Serialize>(path: &Path, provenance: &Value, rows: &[T]) -> CliResult<()> {
    let mut text = to_line(&json!({ "provenance": provenance }))?;
    text.push('\n');
    for row in rows {
        text.push_str(&to_line(row)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Tab-separated file with a header row and two columns.
pub fn write_tsv<I>(path: &Path, header: (&str, &str), rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut text = format!("{}\t{}\n", header.0, header.1);
    for (a, b) in rows {
        writeln!(text, "{a}\t{b}").expect("writing to a String cannot fail");
    }
    write_text(path, &text)
}
