//! Sectioned plain-text run reports.
//!
//! ```text
//! # mvbfa report v1
//! [config]
//! command=fit
//! ...
//! [selection]
//! G,q,r,logLik,rho,bic,converged
//! ...
//! ```
//!
//! Sections start with `[name]`; key-value sections use `key=value`, table sections
//! are comma-delimited with a header line.

use std::fmt::Write as _;

use mvbfa::metrics::{ari, confusion, mcr};
use mvbfa::Result;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Report {
    sections: Vec<(String, Vec<String>)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    fn section(&mut self, name: &str) -> &mut Vec<String> {
        if let Some(i) = self.sections.iter().position(|(n, _)| n == name) {
            return &mut self.sections[i].1;
        }
        self.sections.push((name.to_string(), Vec::new()));
        &mut self.sections.last_mut().expect("just pushed").1
    }

    pub fn kv(&mut self, section: &str, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.section(section).push(format!("{key}={value}"));
        self
    }

    pub fn line(&mut self, section: &str, line: impl Into<String>) -> &mut Self {
        self.section(section).push(line.into());
        self
    }

    /// Declares a section even if nothing ends up in it.
    pub fn empty(&mut self, section: &str) -> &mut Self {
        self.section(section);
        self
    }

    /// ARI, MCR and the confusion table of `predicted` against `truth`, under a
    /// `scope` describing which observations were scored.
    pub fn metrics(
        &mut self,
        scope: &str,
        truth: &[usize],
        predicted: &[usize],
    ) -> Result<&mut Self> {
        self.kv("metrics", "scope", scope);
        self.kv("metrics", "n", truth.len());
        if truth.is_empty() {
            return Ok(self);
        }
        if truth.len() >= 2 {
            self.kv("metrics", "ARI", ari(truth, predicted)?);
        }
        self.kv("metrics", "MCR", mcr(truth, predicted)?);
        let table = confusion(truth, predicted)?;
        let header: Vec<String> = table
            .predicted_labels
            .iter()
            .map(|l| l.to_string())
            .collect();
        self.line(
            "confusion",
            format!("truth\\predicted,{}", header.join(",")),
        );
        for (label, row) in table.truth_labels.iter().zip(&table.counts) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            self.line("confusion", format!("{label},{}", cells.join(",")));
        }
        Ok(self)
    }

    pub fn render(&self) -> String {
        let mut out = format!("# mvbfa report v{REPORT_VERSION}\n");
        for (name, lines) in &self.sections {
            let _ = writeln!(out, "[{name}]");
            for line in lines {
                let _ = writeln!(out, "{line}");
            }
        }
        out
    }
}

/// Reads a rendered report back into `(section, lines)` pairs.
#[cfg(test)]
pub fn parse_report(text: &str) -> Vec<(String, Vec<String>)> {
    let mut sections: Vec<(String, Vec<String>)> = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            sections.push((name.to_string(), Vec::new()));
        } else if let Some(last) = sections.last_mut() {
            last.1.push(line.to_string());
        }
    }
    sections
}
