//! Tab-separated tables with `# key: value` provenance lines (tabs shown
//! as `→`):
//!
//! ```text
//! # config_hash: 3f1a…
//! # seed: 7
//! epoch→train_acc→test_acc
//! 0→0.5→0.48
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! parsed back from a table is bit-identical to the one written.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("table has no header row")]
    MissingHeader,
    #[error("line {line}: expected {expected} cells, found {found}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("line {line}: malformed comment {text:?}")]
    BadComment { line: usize, text: String },
    #[error("no column named {0:?}")]
    NoColumn(String),
    #[error("row {row}, column {column:?}: {value:?} is not a number")]
    NotNumeric { row: usize, column: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>, rows: Vec<Vec<String>>) -> Self {
        Table {
            meta: Vec::new(),
            header,
            rows,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column_index(&self, name: &str) -> Result<usize, TableError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TableError::NoColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<&str>, TableError> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>, TableError> {
        let i = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(row, r)| {
                r[i].parse().map_err(|_| TableError::NotNumeric {
                    row,
                    column: name.to_string(),
                    value: r[i].clone(),
                })
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let _ = writeln!(out, "{}", self.header.join("\t"));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join("\t"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Table, TableError> {
        let mut table = Table::default();
        let mut have_header = false;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.trim_start().split_once(": ").ok_or_else(|| TableError::BadComment {
                    line: line_no,
                    text: line.to_string(),
                })?;
                table.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let cells: Vec<String> = line.split('\t').map(str::to_string).collect();
            if !have_header {
                table.header = cells;
                have_header = true;
            } else if cells.len() != table.header.len() {
                return Err(TableError::Ragged {
                    line: line_no,
                    expected: table.header.len(),
                    found: cells.len(),
                });
            } else {
                table.rows.push(cells);
            }
        }
        if !have_header {
            return Err(TableError::MissingHeader);
        }
        Ok(table)
    }

    pub fn write_to(&self, path: &Path) -> std::io::Result<()> {
        crate::fsutil::write_atomic(path, self.render().as_bytes())
    }
}
