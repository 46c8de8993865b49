//! Test-suite execution and baseline/CFI comparison.
//!
//! `test_cmd` only enumerates tests. It prints one line per test:
//!
//! ```text
//! TEST\t<test_id>\t<shell command>
//! ```
//!
//! Other lines are ignored. Each command is then run by the harness under
//! the tracer, from the project root, so traps in grandchildren are seen.
//! `CFI_HEAL_MODE` is set to `baseline` or `cfi` for both steps.

use std::collections::BTreeMap;
use std::process::Command;
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::build::{BuildMode, BuildOutcome};
use crate::config::ProjectConfig;
use crate::trace::{run_traced, OutcomeKind, TraceError, TraceOutcome, TracedCommand};

pub const MODE_ENV: &str = "CFI_HEAL_MODE";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestSpec {
    pub id: String,
    pub command: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_id: String,
    pub command: String,
    pub outcome: TraceOutcome,
    pub passed: bool,
    pub trapped_cfi: bool,
}

impl TestResult {
    pub fn new(test_id: impl Into<String>, command: impl Into<String>, mut outcome: TraceOutcome) -> Self {
        let test_id = test_id.into();
        if let OutcomeKind::Trapped(event) = &mut outcome.kind {
            event.test_id = Some(test_id.clone());
        }
        TestResult {
            passed: outcome.passed(),
            trapped_cfi: outcome.trapped_cfi(),
            test_id,
            command: command.into(),
            outcome,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureClass {
    Pass,
    BaselineFailure,
    CfiPolicyViolation,
    FunctionalNonCfi,
}

impl FailureClass {
    pub const ALL: [FailureClass; 4] = [
        FailureClass::Pass,
        FailureClass::BaselineFailure,
        FailureClass::CfiPolicyViolation,
        FailureClass::FunctionalNonCfi,
    ];
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("test command produced no `TEST<TAB>id<TAB>command` lines")]
    NoTests,
    #[error("test command `{command}` failed to run: {source}")]
    Enumerate {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot run tests against a failed build")]
    BuildFailed,
    #[error("classifying `{baseline}` against `{cfi}`")]
    Mismatch { baseline: String, cfi: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Test lines from `test_cmd` output, in order; later duplicates of an id
/// are dropped.
pub fn parse_test_list(stdout: &str) -> Vec<TestSpec> {
    let mut out: Vec<TestSpec> = Vec::new();
    for line in stdout.lines() {
        let mut parts = line.splitn(3, '\t');
        if parts.next() != Some("TEST") {
            continue;
        }
        let (Some(id), Some(command)) = (parts.next(), parts.next()) else {
            continue;
        };
        let (id, command) = (id.trim(), command.trim());
        if id.is_empty() || command.is_empty() {
            continue;
        }
        if out.iter().any(|t| t.id == id) {
            warn!("duplicate test id {id}; keeping the first");
            continue;
        }
        out.push(TestSpec {
            id: id.to_string(),
            command: command.to_string(),
        });
    }
    out
}

pub fn enumerate_tests(cfg: &ProjectConfig, mode: &BuildMode) -> Result<Vec<TestSpec>, HarnessError> {
    let output = Command::new("sh")
        .arg("-c")
        .arg(&cfg.test_cmd)
        .current_dir(&cfg.project_root)
        .env(MODE_ENV, mode.label())
        .output()
        .map_err(|source| HarnessError::Enumerate {
            command: cfg.test_cmd.clone(),
            source,
        })?;
    let tests = parse_test_list(&String::from_utf8_lossy(&output.stdout));
    if tests.is_empty() {
        return Err(HarnessError::NoTests);
    }
    Ok(tests)
}

pub fn run_test(cfg: &ProjectConfig, mode: &BuildMode, test: &TestSpec) -> Result<TestResult, HarnessError> {
    let mut cmd = TracedCommand::new(&test.command, &cfg.project_root);
    cmd.env.push((MODE_ENV.to_string(), mode.label().to_string()));
    let outcome = run_traced(&cmd, Duration::from_secs(cfg.test_timeout))?;
    let result = TestResult::new(&test.id, &test.command, outcome);
    info!("{} test {}: {}", mode.label(), test.id, describe(&result.outcome.kind));
    Ok(result)
}

/// Runs the suite, or only the tests named in `only`, sequentially.
pub fn run_suite(
    cfg: &ProjectConfig,
    mode: &BuildMode,
    build: &BuildOutcome,
    only: Option<&[String]>,
) -> Result<Vec<TestResult>, HarnessError> {
    if !build.succeeded {
        return Err(HarnessError::BuildFailed);
    }
    let tests = enumerate_tests(cfg, mode)?;
    tests
        .iter()
        .filter(|t| only.is_none_or(|ids| ids.contains(&t.id)))
        .map(|t| run_test(cfg, mode, t))
        .collect()
}

pub fn describe(kind: &OutcomeKind) -> String {
    match kind {
        OutcomeKind::Exited(code) => format!("exit {code}"),
        OutcomeKind::Trapped(e) => format!("{:?} at {:#x}", e.signal, e.fault_pc),
        OutcomeKind::TimedOut => "timed out".to_string(),
        OutcomeKind::Signalled(sig) => format!("signal {sig}"),
    }
}

pub fn classify(baseline: &TestResult, cfi: &TestResult) -> Result<FailureClass, HarnessError> {
    if baseline.test_id != cfi.test_id {
        return Err(HarnessError::Mismatch {
            baseline: baseline.test_id.clone(),
            cfi: cfi.test_id.clone(),
        });
    }
    Ok(if !baseline.passed {
        FailureClass::BaselineFailure
    } else if cfi.trapped_cfi {
        FailureClass::CfiPolicyViolation
    } else if !cfi.passed {
        FailureClass::FunctionalNonCfi
    } else {
        FailureClass::Pass
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteDiff {
    pub counts: BTreeMap<FailureClass, usize>,
    /// Classified tests in baseline order.
    pub classes: Vec<(String, FailureClass)>,
    /// Tests present in only one of the two suites.
    pub indeterminate: Vec<String>,
}

impl SuiteDiff {
    pub fn count(&self, class: FailureClass) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn class_of(&self, test_id: &str) -> Option<FailureClass> {
        self.classes.iter().find(|(id, _)| id == test_id).map(|(_, c)| *c)
    }

    pub fn with_class(&self, class: FailureClass) -> Vec<&str> {
        self.classes
            .iter()
            .filter(|(_, c)| *c == class)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

pub fn diff_suites(baseline: &[TestResult], cfi: &[TestResult]) -> SuiteDiff {
    let mut diff = SuiteDiff::default();
    for b in baseline {
        match cfi.iter().find(|c| c.test_id == b.test_id) {
            Some(c) => {
                let class = classify(b, c).expect("ids match");
                *diff.counts.entry(class).or_default() += 1;
                diff.classes.push((b.test_id.clone(), class));
            }
            None => diff.indeterminate.push(b.test_id.clone()),
        }
    }
    for c in cfi {
        if !baseline.iter().any(|b| b.test_id == c.test_id) {
            diff.indeterminate.push(c.test_id.clone());
        }
    }
    diff
}
