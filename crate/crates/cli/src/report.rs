//! JSON report and CSV tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

/// One numeric check. `value` and `tolerance` serialize non-finite values as
/// `null`.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    /// How `value` is compared with `tolerance`.
    pub expect: &'static str,
    pub pass: bool,
    pub provenance: String,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64, provenance: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            expect: "value <= tolerance",
            pass: value <= tolerance,
            provenance: provenance.into(),
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, tolerance: f64, provenance: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            expect: "value >= tolerance",
            pass: value >= tolerance,
            provenance: provenance.into(),
        }
    }

    /// `|value| <= tolerance`.
    pub fn expected_zero(name: impl Into<String>, value: f64, tolerance: f64, provenance: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            expect: "expected-zero",
            pass: value.abs() <= tolerance,
            provenance: provenance.into(),
        }
    }

    /// `|value| > tolerance`.
    pub fn expected_nonzero(name: impl Into<String>, value: f64, tolerance: f64, provenance: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            expect: "expected-nonzero",
            pass: value.abs() > tolerance,
            provenance: provenance.into(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub parallel: bool,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub meta: Meta,
    pub inputs: BTreeMap<String, String>,
    pub results: Value,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// A CSV table built row by row.
#[derive(Clone, Debug)]
pub struct Table {
    pub file: String,
    text: String,
}

impl Table {
    pub fn new(file: &str, header: &[&str]) -> Self {
        Self {
            file: file.to_string(),
            text: header.join(",") + "\n",
        }
    }

    pub fn from_text(file: &str, text: String) -> Self {
        Self {
            file: file.to_string(),
            text,
        }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        let line: Vec<String> = cells.iter().map(Cell::render).collect();
        let _ = writeln!(self.text, "{}", line.join(","));
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

pub enum Cell {
    Int(usize),
    Num(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) if x.is_finite() => format!("{x:.16e}"),
            Cell::Num(_) => "nan".into(),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Write the report and tables into `dir`, creating it if needed.
pub fn write_all(dir: &Path, report: &Report, tables: &[Table]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    fs::write(dir.join("report.json"), json + "\n")?;
    for t in tables {
        fs::write(dir.join(&t.file), t.text())?;
    }
    Ok(())
}
