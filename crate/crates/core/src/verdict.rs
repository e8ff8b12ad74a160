use serde::{Deserialize, Serialize};

/// Outcome of one check, stating what was tested and on how many samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    /// The test applied, e.g. "one-sided Wilson 95% upper bound ≤ theory".
    pub test: String,
    pub sample_size: u64,
    pub violations: u64,
    pub counterexample: Option<String>,
}

impl Verdict {
    pub fn new(name: impl Into<String>, test: impl Into<String>) -> Self {
        Verdict {
            name: name.into(),
            passed: true,
            test: test.into(),
            sample_size: 0,
            violations: 0,
            counterexample: None,
        }
    }

    /// Counts one checked sample; `ok == false` records a violation and
    /// keeps the first counterexample.
    pub fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.sample_size += 1;
        if !ok {
            self.violations += 1;
            self.passed = false;
            if self.counterexample.is_none() {
                self.counterexample = Some(describe());
            }
        }
    }

    /// Folds another verdict of the same check into this one.
    pub fn merge(&mut self, other: &Verdict) {
        self.sample_size += other.sample_size;
        self.violations += other.violations;
        self.passed &= other.passed;
        if self.counterexample.is_none() {
            self.counterexample.clone_from(&other.counterexample);
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {} [{}; n={}, violations={}]",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.test,
            self.sample_size,
            self.violations
        )
    }
}
