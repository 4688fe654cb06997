//! Append-only CSV metric logs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl MetricsLog {
    /// Opens `path` with the given header. A fresh run truncates the file; a
    /// run resumed at `resume_step` keeps only rows up to that step, so rows
    /// written after the last saved state are not duplicated.
    pub fn open(path: &Path, columns: &[&str], resume_step: Option<u64>) -> Result<Self> {
        let header = columns.join(",");
        let mut kept = vec![header.clone()];
        if let Some(limit) = resume_step {
            if let Ok(text) = std::fs::read_to_string(path) {
                let mut lines = text.lines();
                if lines.next() != Some(header.as_str()) {
                    return Err(invalid!(
                        "metrics log {} has a different header",
                        path.display()
                    ));
                }
                kept.extend(
                    lines
                        .filter(|l| {
                            l.split(',')
                                .next()
                                .and_then(|s| s.parse::<u64>().ok())
                                .is_some_and(|s| s <= limit)
                        })
                        .map(str::to_string),
                );
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut text = kept.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            columns: columns.len(),
        })
    }

    /// Writes one row. Integral columns (step, epoch) are printed without a fraction.
    pub fn row(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.columns {
            return Err(invalid!(
                "metrics row has {} values for {} columns",
                values.len(),
                self.columns
            ));
        }
        let line: Vec<String> = values
            .iter()
            .map(|v| {
                if v.fract() == 0.0 && v.abs() < 1e15 {
                    format!("{}", *v as i64)
                } else {
                    format!("{v:e}")
                }
            })
            .collect();
        writeln!(self.out, "{}", line.join(",")).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a metrics log back into its header and numeric rows.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| invalid!("metrics log {} is empty", path.display()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| invalid!("bad metric value {v:?} in {}", path.display()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}
