//! Per-run accuracy rows and their summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const RESULTS_HEADER: &str = "method,device,trial,accuracy";

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub device: String,
    pub trial: usize,
    pub accuracy: f64,
}

/// Raw `(method, device, trial)` accuracies, kept sorted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    rows: Vec<ResultRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceSummary {
    pub device: String,
    pub mean: f64,
    /// Population standard deviation over trials.
    pub std: f64,
    pub trials: usize,
}

impl ResultTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ResultRow) {
        self.rows.push(row);
        self.rows.sort_by(|a, b| (&a.method, &a.device, a.trial).cmp(&(&b.method, &b.device, b.trial)));
    }

    pub fn extend(&mut self, other: ResultTable) {
        for r in other.rows {
            self.push(r);
        }
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    /// Method names in first-seen (sorted) order.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn devices(&self) -> Vec<String> {
        let mut out: Vec<String> = self.rows.iter().map(|r| r.device.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn per_device(&self, method: &str) -> Vec<DeviceSummary> {
        let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.method == method) {
            by.entry(&r.device).or_default().push(r.accuracy);
        }
        by.into_iter()
            .map(|(d, v)| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / v.len() as f64;
                DeviceSummary { device: d.to_string(), mean, std: var.sqrt(), trials: v.len() }
            })
            .collect()
    }

    /// Mean over every device-trial cell of `method`.
    pub fn grand_mean(&self, method: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == method).map(|r| r.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per-trial means over devices, for seed-level spread.
    pub fn trial_means(&self, method: &str) -> Vec<f64> {
        let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.method == method) {
            by.entry(r.trial).or_default().push(r.accuracy);
        }
        by.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6}", r.method, r.device, r.trial, r.accuracy);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == RESULTS_HEADER => {}
            _ => return Err(Error::Parse { line: 1, message: format!("expected header '{RESULTS_HEADER}'") }),
        }
        let mut table = ResultTable::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = |m: &str| Error::Parse { line: i + 1, message: m.to_string() };
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            table.push(ResultRow {
                method: f[0].to_string(),
                device: f[1].to_string(),
                trial: f[2].parse().map_err(|_| bad("trial is not an integer"))?,
                accuracy: f[3].parse().map_err(|_| bad("accuracy is not a number"))?,
            });
        }
        Ok(table)
    }

    /// Methods as rows, devices as columns (mean ± std over trials, in %), plus the grand mean.
    pub fn to_markdown(&self) -> String {
        let devices = self.devices();
        let mut out = String::from("| method |");
        for d in &devices {
            let _ = write!(out, " {d} |");
        }
        out.push_str(" mean |\n|---|");
        out.push_str(&"---|".repeat(devices.len() + 1));
        out.push('\n');
        for m in self.methods() {
            let _ = write!(out, "| {m} |");
            let summary = self.per_device(&m);
            for d in &devices {
                match summary.iter().find(|s| &s.device == d) {
                    Some(s) => {
                        let _ = write!(out, " {:.2} ± {:.2} |", 100.0 * s.mean, 100.0 * s.std);
                    }
                    None => out.push_str(" - |"),
                }
            }
            let _ = writeln!(out, " {:.2} |", 100.0 * self.grand_mean(&m).unwrap_or(f64::NAN));
        }
        out
    }
}
