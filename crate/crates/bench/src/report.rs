//! Experiment reports: one JSON document, a plain-text summary and one TSV
//! file per table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str], rows: Vec<Vec<Value>>) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.columns.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.iter().map(cell).collect::<Vec<_>>().join("\t"));
            s.push('\n');
        }
        s
    }

    /// Column-aligned text.
    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = std::iter::once(self.columns.clone())
            .chain(self.rows.iter().map(|r| r.iter().map(cell).collect()))
            .collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|i| cells.iter().map(|r| r.get(i).map_or(0, String::len)).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for r in &cells {
            let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
        }
        s
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:.6}")
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string(),
            _ => n.to_string(),
        },
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub config: Value,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn new(experiment: &str, config: Value) -> Self {
        Report {
            experiment: experiment.into(),
            config,
            tables: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("== {} ==\n", self.experiment);
        for t in &self.tables {
            let _ = write!(s, "\n[{}]\n{}", t.name, t.to_text());
        }
        if !self.checks.is_empty() {
            s.push('\n');
        }
        for c in &self.checks {
            let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    /// Writes `<experiment>.json`, `<experiment>.txt` and
    /// `<experiment>_<table>.tsv` into `dir`; returns the paths.
    pub fn write(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        let json = dir.join(format!("{}.json", self.experiment));
        std::fs::write(&json, serde_json::to_string_pretty(self).expect("report serializes"))?;
        out.push(json);
        let txt = dir.join(format!("{}.txt", self.experiment));
        std::fs::write(&txt, self.to_text())?;
        out.push(txt);
        for t in &self.tables {
            let p = dir.join(format!("{}_{}.tsv", self.experiment, t.name));
            std::fs::write(&p, t.to_tsv())?;
            out.push(p);
        }
        Ok(out)
    }
}
