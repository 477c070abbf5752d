//! CSV writers. Floats are printed with 17 significant digits so that files
//! round-trip bitwise.

use std::io::Write;
use std::path::{Path, PathBuf};

pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    format!("{:.16e}", x)
}

/// Simple table accumulated in memory and written at once.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    pub fn push_f64(&mut self, vals: &[f64]) {
        self.rows.push(vals.iter().map(|&v| fmt17(v)).collect());
    }

    pub fn push(&mut self, vals: Vec<String>) {
        self.rows.push(vals);
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_string().as_bytes())
    }
}

impl std::fmt::Display for Table {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{}", self.header.join(","))?;
        for r in &self.rows {
            writeln!(f, "{}", r.join(","))?;
        }
        Ok(())
    }
}

/// Per-run directory `<root>/<config hash>`.
pub fn run_dir(root: &Path, hash: &str) -> std::io::Result<PathBuf> {
    let d = root.join(hash);
    std::fs::create_dir_all(&d)?;
    Ok(d)
}
