//! `report.json` and its HTML rendering.
//!
//! The JSON document is canonical. `schema_version` changes whenever a field
//! is removed or changes meaning. The HTML page is rendered from the parsed
//! JSON alone, so rendering a saved `report.json` again gives identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::census::{total_sites, IrSiteCensus};
use crate::coverage::{CoverageCore, Distribution};
use crate::escalation::{LadderLevel, Violation, ViolationStatus};
use crate::harness::{describe, FailureClass, SuiteDiff, TestResult};
use crate::visibility::RepairLedger;

pub const SCHEMA_VERSION: u32 = 1;
pub const JSON_FILE: &str = "report.json";
pub const HTML_FILE: &str = "report.html";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Json,
    Html,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub id: u32,
    pub test_ids: Vec<String>,
    pub binary: String,
    pub fault_pc: String,
    pub callee: Option<String>,
    pub caller: Option<String>,
    pub file: Option<String>,
    pub line: Option<u32>,
    pub level: LadderLevel,
    pub status: ViolationStatus,
    pub entry: Option<String>,
    pub attempts: u32,
}

impl From<&Violation> for ViolationSummary {
    fn from(v: &Violation) -> Self {
        ViolationSummary {
            id: v.id.0,
            test_ids: v.test_ids.clone(),
            binary: v.key.binary.display().to_string(),
            fault_pc: format!("{:#x}", v.key.static_pc),
            callee: v.callee.function.clone(),
            caller: v.caller.as_ref().and_then(|c| c.function.clone()),
            file: v.callee.source_file.as_ref().map(|p| p.display().to_string()),
            line: v.callee.line,
            level: v.ladder_level,
            status: v.status,
            entry: match v.status {
                ViolationStatus::Fixed(level) => v.rule_for(level).map(|r| r.to_string()),
                _ => None,
            },
            attempts: v.attempts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestRow {
    pub test_id: String,
    pub class: Option<FailureClass>,
    pub baseline: Option<String>,
    pub cfi: Option<String>,
    /// Advisory only; output differences never change the class.
    pub output_matches: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSummary {
    pub total: usize,
    pub counts: BTreeMap<FailureClass, usize>,
    pub indeterminate: Vec<String>,
    pub tests: Vec<TestRow>,
}

impl TestSummary {
    pub fn from_results(baseline: &[TestResult], cfi: &[TestResult], diff: &SuiteDiff) -> Self {
        let find = |set: &[TestResult], id: &str| set.iter().find(|t| t.test_id == id).cloned();
        let mut ids: Vec<String> = baseline.iter().map(|t| t.test_id.clone()).collect();
        for t in cfi {
            if !ids.contains(&t.test_id) {
                ids.push(t.test_id.clone());
            }
        }
        let tests = ids
            .iter()
            .map(|id| {
                let b = find(baseline, id);
                let c = find(cfi, id);
                TestRow {
                    test_id: id.clone(),
                    class: diff.class_of(id),
                    output_matches: match (&b, &c) {
                        (Some(b), Some(c)) => Some(
                            b.outcome.stdout_digest == c.outcome.stdout_digest
                                && b.outcome.stderr_digest == c.outcome.stderr_digest,
                        ),
                        _ => None,
                    },
                    baseline: b.map(|t| describe(&t.outcome.kind)),
                    cfi: c.map(|t| describe(&t.outcome.kind)),
                }
            })
            .collect();
        TestSummary {
            total: ids.len(),
            counts: diff.counts.clone(),
            indeterminate: diff.indeterminate.clone(),
            tests,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub schema_version: u32,
    pub project_root: String,
    pub variants: Vec<String>,
    pub per_function: Distribution,
    pub per_call_site: Distribution,
    /// Protected share of indirect call sites.
    pub total_cfi_coverage: f64,
    pub function_counts: [u64; 3],
    pub call_site_counts: [u64; 3],
    pub census: IrSiteCensus,
    pub census_total: u64,
    pub violations: Vec<ViolationSummary>,
    pub fixed: usize,
    pub unresolvable: usize,
    pub ignorelist: Vec<String>,
    pub ledger: RepairLedger,
    pub test_summary: TestSummary,
    pub build_time: f64,
    pub duration: f64,
}

impl CoverageReport {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        project_root: &Path,
        variants: Vec<String>,
        core: &CoverageCore,
        census: IrSiteCensus,
        violations: &[Violation],
        ignorelist: Vec<String>,
        ledger: RepairLedger,
        test_summary: TestSummary,
        build_time: f64,
        duration: f64,
    ) -> Self {
        let violations: Vec<ViolationSummary> = violations.iter().map(ViolationSummary::from).collect();
        CoverageReport {
            schema_version: SCHEMA_VERSION,
            project_root: project_root.display().to_string(),
            variants,
            per_function: core.per_function,
            per_call_site: core.per_call_site,
            total_cfi_coverage: core.per_call_site.protected,
            function_counts: core.function_counts,
            call_site_counts: core.call_site_counts,
            census,
            census_total: total_sites(&census),
            fixed: violations
                .iter()
                .filter(|v| matches!(v.status, ViolationStatus::Fixed(_)))
                .count(),
            unresolvable: violations
                .iter()
                .filter(|v| v.status == ViolationStatus::Unresolvable)
                .count(),
            violations,
            ignorelist,
            ledger,
            test_summary,
            build_time,
            duration,
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write report to {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid report JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    Schema { found: u64 },
}

pub fn format_duration(seconds: f64) -> String {
    let total = seconds.max(0.0).round() as u64;
    format!("{:02}:{:02}:{:02}", total / 3600, total % 3600 / 60, total % 60)
}

/// Violations per translation unit: (file, violation count, triggering tests).
pub fn violations_by_file(violations: &[ViolationSummary]) -> Vec<(String, usize, Vec<String>)> {
    let mut groups: BTreeMap<String, (usize, Vec<String>)> = BTreeMap::new();
    for v in violations {
        let file = v.file.clone().unwrap_or_else(|| "(unknown)".to_string());
        let entry = groups.entry(file).or_default();
        entry.0 += 1;
        for t in &v.test_ids {
            if !entry.1.contains(t) {
                entry.1.push(t.clone());
            }
        }
    }
    let mut rows: Vec<_> = groups.into_iter().map(|(f, (n, t))| (f, n, t)).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn table(out: &mut String, head: &[&str], rows: &[Vec<String>]) {
    out.push_str("<table>\n<tr>");
    for h in head {
        let _ = write!(out, "<th>{}</th>", escape(h));
    }
    out.push_str("</tr>\n");
    for row in rows {
        out.push_str("<tr>");
        for cell in row {
            let _ = write!(out, "<td>{}</td>", escape(cell));
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</table>\n");
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

pub fn render_html(r: &CoverageReport) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>CFI coverage report</title>\n");
    out.push_str("<style>body{font-family:sans-serif}table{border-collapse:collapse;margin-bottom:1em}td,th{border:1px solid #999;padding:2px 8px;text-align:left}</style>\n</head>\n<body>\n");
    let _ = writeln!(out, "<h1>CFI coverage: {}</h1>", escape(&r.project_root));
    table(
        &mut out,
        &["variants", "tests", "violations", "fixed", "unresolvable", "coverage (IR)", "build time", "duration"],
        &[vec![
            r.variants.join(", "),
            r.test_summary.total.to_string(),
            r.violations.len().to_string(),
            r.fixed.to_string(),
            r.unresolvable.to_string(),
            format!("{}%", pct(r.total_cfi_coverage)),
            format_duration(r.build_time),
            format_duration(r.duration),
        ]],
    );

    out.push_str("<h2>Enforcement distribution</h2>\n");
    let dist_row = |label: &str, d: &Distribution, counts: &[u64; 3]| {
        vec![
            label.to_string(),
            format!("{} ({})", pct(d.protected), counts[0]),
            format!("{} ({})", pct(d.default_visibility), counts[1]),
            format!("{} ({})", pct(d.ignored), counts[2]),
        ]
    };
    table(
        &mut out,
        &["aggregation", "protected %", "default visibility %", "ignored %"],
        &[
            dist_row("per function", &r.per_function, &r.function_counts),
            dist_row("per indirect call site", &r.per_call_site, &r.call_site_counts),
        ],
    );

    out.push_str("<h2>Indirect control-flow census</h2>\n");
    let c = &r.census;
    table(
        &mut out,
        &["fp calls", "virtual calls", "callback stores", "jump tables (switch)", "jump tables (lowered)", "inline asm", "total"],
        &[[c.fp_calls, c.virtual_calls, c.callback_stores, c.jt_switch, c.jt_lowered, c.inline_asm, r.census_total]
            .iter()
            .map(u64::to_string)
            .collect()],
    );

    out.push_str("<h2>Violations by translation unit</h2>\n");
    let rows: Vec<Vec<String>> = violations_by_file(&r.violations)
        .into_iter()
        .map(|(f, n, t)| vec![f, n.to_string(), t.join(", ")])
        .collect();
    table(&mut out, &["file", "violations", "triggering tests"], &rows);

    out.push_str("<h2>Violations</h2>\n");
    let rows: Vec<Vec<String>> = r
        .violations
        .iter()
        .map(|v| {
            vec![
                format!("V{}", v.id),
                v.binary.clone(),
                v.fault_pc.clone(),
                v.callee.clone().unwrap_or_default(),
                v.caller.clone().unwrap_or_default(),
                match (&v.file, v.line) {
                    (Some(f), Some(l)) => format!("{f}:{l}"),
                    (Some(f), None) => f.clone(),
                    _ => String::new(),
                },
                match v.status {
                    ViolationStatus::Fixed(l) => format!("fixed at {l}"),
                    ViolationStatus::Open => "open".to_string(),
                    ViolationStatus::Unresolvable => "unresolvable".to_string(),
                },
                v.entry.clone().unwrap_or_default(),
                v.test_ids.join(", "),
            ]
        })
        .collect();
    table(
        &mut out,
        &["id", "binary", "fault pc", "callee", "caller", "location", "status", "entry", "tests"],
        &rows,
    );

    out.push_str("<h2>Ignorelist</h2>\n<pre>");
    for line in &r.ignorelist {
        let _ = writeln!(out, "{}", escape(line));
    }
    out.push_str("</pre>\n");

    out.push_str("<h2>Visibility patches</h2>\n");
    let _ = writeln!(
        out,
        "<p>iterations: {} build phase, {} test phase</p>",
        r.ledger.iterations_build_phase, r.ledger.iterations_test_phase
    );
    let rows: Vec<Vec<String>> = r
        .ledger
        .patches
        .iter()
        .map(|p| {
            vec![
                p.iteration.to_string(),
                p.symbol.clone(),
                format!("{}:{}", p.file.display(), p.line),
            ]
        })
        .collect();
    table(&mut out, &["iteration", "symbol", "location"], &rows);

    out.push_str("<h2>Tests</h2>\n");
    let counts: Vec<String> = FailureClass::ALL
        .iter()
        .map(|c| format!("{c:?}: {}", r.test_summary.counts.get(c).copied().unwrap_or(0)))
        .collect();
    let _ = writeln!(out, "<p>{}</p>", escape(&counts.join(", ")));
    let rows: Vec<Vec<String>> = r
        .test_summary
        .tests
        .iter()
        .map(|t| {
            vec![
                t.test_id.clone(),
                t.class.map_or("indeterminate".to_string(), |c| format!("{c:?}")),
                t.baseline.clone().unwrap_or_default(),
                t.cfi.clone().unwrap_or_default(),
                match t.output_matches {
                    Some(true) => "same".to_string(),
                    Some(false) => "differs".to_string(),
                    None => String::new(),
                },
            ]
        })
        .collect();
    table(&mut out, &["test", "class", "baseline", "cfi", "output"], &rows);
    out.push_str("</body>\n</html>\n");
    out
}

pub fn to_json(report: &CoverageReport) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<CoverageReport, ReportError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != u64::from(SCHEMA_VERSION) {
        return Err(ReportError::Schema { found });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn load_report(dir: &Path) -> Result<CoverageReport, ReportError> {
    let path = dir.join(JSON_FILE);
    let text = fs::read_to_string(&path).map_err(|source| ReportError::Read { path, source })?;
    from_json(&text)
}

pub fn emit_report(report: &CoverageReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, ReportError> {
    let unwritable = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Unwritable { path, source }
    };
    fs::create_dir_all(dir).map_err(unwritable(dir))?;
    let mut written = Vec::new();
    for format in formats {
        let (name, body) = match format {
            ReportFormat::Json => (JSON_FILE, to_json(report)?),
            ReportFormat::Html => (HTML_FILE, render_html(report)),
        };
        let path = dir.join(name);
        fs::write(&path, body).map_err(unwritable(&path))?;
        written.push(path);
    }
    Ok(written)
}
