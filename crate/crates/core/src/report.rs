//! Experiment reports and their CSV, JSON and markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::verdict::Verdict;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Header of the per-trial CSV.
pub const TRIAL_CSV_HEADER: [&str; 7] = [
    "trial",
    "seed",
    "hit_time",
    "final_dist_sq",
    "tau_max",
    "tau_avg",
    "verdict",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub seed: u64,
    /// First `t` with `‖x_t − x*‖² ≤ ε`, if any.
    pub hit_time: Option<u64>,
    pub final_dist_sq: f64,
    pub tau_max: u64,
    pub tau_avg: f64,
    pub verdict: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment_id: String,
    /// Configuration snapshot, as key/value pairs.
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub trials: Vec<TrialRecord>,
    pub aggregates: BTreeMap<String, f64>,
    /// Theoretical values the aggregates are compared with.
    pub bounds: BTreeMap<String, f64>,
    pub verdicts: Vec<Verdict>,
    pub warnings: Vec<String>,
    /// Wall-clock seconds per phase; not part of reproducibility.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Markdown];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        }
    }
}

impl ExperimentReport {
    pub fn new(experiment_id: impl Into<String>) -> Self {
        ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment_id: experiment_id.into(),
            ..Default::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    /// The report with timings removed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        ExperimentReport {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TRIAL_CSV_HEADER).expect("in-memory write");
        for t in &self.trials {
            w.write_record([
                t.trial.to_string(),
                t.seed.to_string(),
                t.hit_time.map(|h| h.to_string()).unwrap_or_default(),
                t.final_dist_sq.to_string(),
                t.tau_max.to_string(),
                t.tau_avg.to_string(),
                t.verdict.clone(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}\n", self.experiment_id);
        let _ = writeln!(out, "schema version: {}\n", self.schema_version);
        let _ = writeln!(out, "overall: {}\n", if self.passed() { "PASS" } else { "FAIL" });
        if !self.config.is_empty() {
            out.push_str("## Configuration\n\n| key | value |\n|---|---|\n");
            for (k, v) in &self.config {
                let _ = writeln!(out, "| {k} | {v} |");
            }
            out.push('\n');
        }
        for (title, map) in [("Aggregates", &self.aggregates), ("Bounds", &self.bounds)] {
            if map.is_empty() {
                continue;
            }
            let _ = writeln!(out, "## {title}\n\n| name | value |\n|---|---|");
            for (k, v) in map {
                let _ = writeln!(out, "| {k} | {v} |");
            }
            out.push('\n');
        }
        if !self.verdicts.is_empty() {
            out.push_str("## Verdicts\n\n");
            for v in &self.verdicts {
                let _ = writeln!(out, "- {}", v.summary());
                if let Some(c) = &v.counterexample {
                    let _ = writeln!(out, "  - counterexample: {c}");
                }
            }
            out.push('\n');
        }
        if !self.warnings.is_empty() {
            out.push_str("## Warnings\n\n");
            for w in &self.warnings {
                let _ = writeln!(out, "- {w}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "trials: {}, seeds recorded: {}",
            self.trials.len(),
            self.seeds.len()
        );
        out
    }

    /// Writes `<dir>/<experiment_id>.<ext>` for each format.
    pub fn emit(&self, dir: impl AsRef<Path>, formats: &[ReportFormat]) -> io::Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        formats
            .iter()
            .map(|&f| {
                let path = dir.join(format!("{}.{}", self.experiment_id, f.extension()));
                let body = match f {
                    ReportFormat::Csv => self.to_csv(),
                    ReportFormat::Json => self.to_json(),
                    ReportFormat::Markdown => self.to_markdown(),
                };
                std::fs::write(&path, body)?;
                Ok(path)
            })
            .collect()
    }
}

/// Reads the aggregate and bound tables back out of a markdown report.
pub fn parse_markdown_tables(md: &str) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut section: Option<String> = None;
    for line in md.lines() {
        if let Some(title) = line.strip_prefix("## ") {
            section = Some(title.trim().to_string());
            continue;
        }
        let Some(sec) = &section else { continue };
        let cells: Vec<&str> = line.trim().trim_matches('|').split('|').map(str::trim).collect();
        if cells.len() != 2 {
            continue;
        }
        if let Ok(v) = cells[1].parse::<f64>() {
            out.entry(sec.clone()).or_default().insert(cells[0].to_string(), v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentReport {
        let mut r = ExperimentReport::new("demo");
        r.config.insert("run.T".into(), "100".into());
        r.seeds = vec![1, 2];
        r.trials.push(TrialRecord {
            trial: 0,
            seed: 1,
            hit_time: Some(12),
            final_dist_sq: 0.001,
            tau_max: 3,
            tau_avg: 1.25,
            verdict: "hit".into(),
        });
        r.trials.push(TrialRecord {
            trial: 1,
            seed: 2,
            hit_time: None,
            final_dist_sq: 0.5,
            tau_max: 4,
            tau_avg: 2.0,
            verdict: "miss".into(),
        });
        r.aggregates.insert("failure_rate".into(), 0.5);
        r.aggregates.insert("wilson_upper".into(), 0.9054589359888287);
        r.bounds.insert("sequential".into(), 1.0 / 3.0);
        let mut v = Verdict::new("bound", "upper Wilson ≤ bound");
        v.record(false, || "too many failures".into());
        r.verdicts.push(v);
        r
    }

    #[test]
    fn empty_report_csv_is_header_only() {
        let r = ExperimentReport::new("empty");
        assert_eq!(r.to_csv(), "trial,seed,hit_time,final_dist_sq,tau_max,tau_avg,verdict\n");
        assert!(r.passed());
    }

    #[test]
    fn csv_rows() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "0,1,12,0.001,3,1.25,hit");
        assert_eq!(lines[2], "1,2,,0.5,4,2,miss");
    }

    #[test]
    fn json_markdown_round_trip() {
        let r = sample();
        let back = ExperimentReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let tables = parse_markdown_tables(&back.to_markdown());
        assert_eq!(tables["Aggregates"], r.aggregates);
        assert_eq!(tables["Bounds"], r.bounds);
        assert!(!r.passed());
    }

    #[test]
    fn emit_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let a = r.emit(dir.path().join("a"), &ReportFormat::ALL).unwrap();
        let b = r.emit(dir.path().join("b"), &ReportFormat::ALL).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }
}
