//! Plain-text file helpers: numeric formatting, atomic writes, CSV tables.

use std::path::Path;

use crate::error::{Error, Result};

/// 17 significant digits, which round-trips every `f64`.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses a comma-separated numeric table whose header must equal `header`.
pub fn parse_table(text: &str, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    let got: Vec<&str> = first.split(',').map(str::trim).collect();
    if got != header {
        return Err(Error::Parse { line: 1, msg: format!("expected header `{}`, got `{}`", header.join(","), first.trim()) });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(Error::Parse { line: i + 1, msg: format!("expected {} fields, got {}", header.len(), cells.len()) });
        }
        let row = cells
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("invalid number `{c}`") })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub(crate) fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
    Error::Parse { line, msg: e.message().to_string() }
}
