//! The outer healing loop.
//!
//! Baseline build and suite, CFI build with visibility repair, CFI suite
//! under tracing, then escalation rounds until no violation is open. One
//! rebuild is spent per distinct candidate entry in a round; violations that
//! share an entry are re-tested together. A full-suite pass confirms the
//! result. State is written to `<report_dir>/state.json` after every step so
//! a later run resumes with the same ignorelist and violations.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::build::{run_build, BuildError, BuildMode, BuildOutcome, BuildSequence};
use crate::census::{analyze_module, write_diagnostics, ModuleCensus};
use crate::config::{validate_config, Finding, ProjectConfig};
use crate::coverage::{compute_coverage, FunctionInfo};
use crate::escalation::{
    next_scope, record_outcome, Scope, Violation, ViolationId, ViolationKey, ViolationStatus,
};
use crate::harness::{diff_suites, run_suite, FailureClass, HarnessError, SuiteDiff, TestResult};
use crate::ignorelist::{Ignorelist, IgnorelistEntry, IgnorelistError, Rule, IGNORELIST_FILE};
use crate::lock::ProjectLock;
use crate::report::{emit_report, CoverageReport, ReportError, ReportFormat, TestSummary};
use crate::symbolize::{Confidence, SymbolInfo, Symbolizer};
use crate::trace::TrapEvent;
use crate::visibility::{
    read_journal, repair_until_buildable, RepairError, RepairLedger, RepairOutcome, RepairPhase, Termination,
};

pub const STATE_FILE: &str = "state.json";
pub const CENSUS_DIAGNOSTICS_FILE: &str = "census-diagnostics.jsonl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[default]
    Building,
    Analyzing,
    Testing,
    Done,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub phase: Phase,
    pub iteration: u32,
    pub open_violations: Vec<ViolationId>,
    pub fixed: usize,
    pub unresolvable: usize,
    pub functional: usize,
    pub violations: Vec<Violation>,
    pub ignorelist: Ignorelist,
    pub ledger: RepairLedger,
    pub next_violation_id: u32,
}

impl PipelineState {
    pub fn load(report_dir: &Path) -> Result<Option<PipelineState>, PipelineError> {
        let path = report_dir.join(STATE_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text).map_err(|e| PipelineError::State {
                path,
                detail: e.to_string(),
            })?)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, report_dir: &Path) -> Result<(), PipelineError> {
        let path = report_dir.join(STATE_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| PipelineError::State {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let tmp = report_dir.join(format!("{STATE_FILE}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn refresh(&mut self, diff: Option<&SuiteDiff>) {
        self.open_violations = self.violations.iter().filter(|v| v.is_open()).map(|v| v.id).collect();
        self.fixed = self
            .violations
            .iter()
            .filter(|v| matches!(v.status, ViolationStatus::Fixed(_)))
            .count();
        self.unresolvable = self
            .violations
            .iter()
            .filter(|v| v.status == ViolationStatus::Unresolvable)
            .count();
        if let Some(d) = diff {
            self.functional = d.count(FailureClass::FunctionalNonCfi);
        }
    }

    pub fn violation(&self, id: ViolationId) -> Option<&Violation> {
        self.violations.iter().find(|v| v.id == id)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {}", .0.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<Finding>),
    #[error("baseline build failed (log: {})", log_of(.0))]
    BaselineBuild(Box<BuildOutcome>),
    #[error("CFI build failed after visibility repair ({termination:?}; log: {}; unresolved: {})", log_of(.outcome), .unresolved.join(", "))]
    CfiBuild {
        outcome: Box<BuildOutcome>,
        termination: Termination,
        unresolved: Vec<String>,
    },
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Ignorelist(#[from] IgnorelistError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("corrupt state file {path}: {detail}")]
    State { path: PathBuf, detail: String },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

fn log_of(outcome: &BuildOutcome) -> String {
    outcome
        .log_path
        .as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

#[derive(Debug)]
pub struct HealOutcome {
    pub report: CoverageReport,
    pub state: PipelineState,
    /// Visibility patches applied by this run.
    pub new_patches: usize,
    /// Active ignorelist rules that did not exist before this run.
    pub new_entries: usize,
    /// Escalation stopped at `max_repair_iterations` with violations open.
    pub exhausted: bool,
}

impl HealOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.state.unresolvable > 0 {
            1
        } else {
            0
        }
    }
}

struct Session<'a> {
    cfg: &'a ProjectConfig,
    lock: ProjectLock,
    mode: BuildMode,
    ignorelist_path: PathBuf,
    builds: BuildSequence,
    symbolizer: Symbolizer,
    state: PipelineState,
    baseline: Vec<TestResult>,
    build_time: f64,
}

fn unknown_symbol() -> SymbolInfo {
    SymbolInfo {
        function: None,
        source_file: None,
        line: None,
        confidence: Confidence::BoundaryHeuristic,
    }
}

impl Session<'_> {
    fn save(&self) -> Result<(), PipelineError> {
        self.state.save(&self.cfg.report_dir)
    }

    fn write_ignorelist(&self) -> Result<(), PipelineError> {
        self.state.ignorelist.write(&self.ignorelist_path)?;
        Ok(())
    }

    fn in_project(&self, path: &Path) -> bool {
        path.starts_with(&self.cfg.project_root)
    }

    fn key_of(&mut self, trap: &TrapEvent) -> ViolationKey {
        match self.symbolizer.static_address(&trap.mappings, trap.fault_pc) {
            Some((binary, static_pc)) => ViolationKey { binary, static_pc },
            None => ViolationKey {
                binary: trap.binary.clone(),
                static_pc: trap.fault_pc,
            },
        }
    }

    /// Symbol identity of an address; frames outside the project have none.
    fn identity(&mut self, trap: &TrapEvent, runtime: u64) -> Option<SymbolInfo> {
        // indexing an image outside the project (libc) is slow and useless
        let image = trap.mappings.iter().find(|m| m.contains(runtime))?.path.as_deref()?;
        if !self.in_project(image) {
            return None;
        }
        let (binary, addr) = self.symbolizer.static_address(&trap.mappings, runtime)?;
        if !self.in_project(&binary) {
            return None;
        }
        match self.symbolizer.resolve(&binary, addr) {
            Ok(info) => Some(info),
            Err(e) => {
                warn!("{e}");
                None
            }
        }
    }

    fn new_violation(&mut self, key: ViolationKey, test_id: &str, trap: &TrapEvent) -> Violation {
        let callee = self.identity(trap, trap.fault_pc).unwrap_or_else(unknown_symbol);
        // a return address points past the call; step back into it
        let mut frames = trap
            .return_addresses
            .iter()
            .map(|&ret| self.identity(trap, ret.saturating_sub(1)))
            .collect::<Vec<_>>()
            .into_iter();
        let caller = frames.next().flatten();
        let callers_caller = frames.next().flatten();
        self.state.next_violation_id += 1;
        let id = ViolationId(self.state.next_violation_id);
        info!(
            "{id}: trap at {:#x} in {} (test {test_id})",
            key.static_pc,
            callee.function.as_deref().unwrap_or("?")
        );
        Violation::new(id, key, Some(test_id.to_string()), trap.clone(), callee, caller, callers_caller)
    }

    /// Records CFI traps from `results` whose baseline passed. Returns how
    /// many violations were created or reopened.
    fn absorb_traps(&mut self, results: &[TestResult]) -> usize {
        let mut changed = 0;
        for r in results {
            let Some(trap) = r.outcome.trap().filter(|t| t.is_cfi()) else { continue };
            let baseline_passed = self.baseline.iter().any(|b| b.test_id == r.test_id && b.passed);
            if !baseline_passed {
                continue;
            }
            let key = self.key_of(trap);
            match self.state.violations.iter_mut().find(|v| v.key == key) {
                Some(v) => {
                    v.add_test(&r.test_id);
                    if let ViolationStatus::Fixed(level) = v.status {
                        // its entry is active yet the trap is back
                        warn!("{}: trap reappeared despite {level} entry; escalating", v.id);
                        v.status = ViolationStatus::Open;
                        record_outcome(v, &mut self.state.ignorelist, true);
                        changed += 1;
                    }
                }
                None => {
                    let v = self.new_violation(key, &r.test_id, trap);
                    self.state.violations.push(v);
                    changed += 1;
                }
            }
        }
        changed
    }

    fn rebuild(&mut self, phase: RepairPhase) -> Result<BuildOutcome, PipelineError> {
        self.write_ignorelist()?;
        let RepairOutcome {
            build,
            termination,
            unresolved,
            build_time,
            ..
        } = repair_until_buildable(self.cfg, &self.mode, phase, &mut self.state.ledger, &mut self.builds, &self.lock)?;
        self.build_time += build_time;
        if termination != Termination::Built {
            return Err(PipelineError::CfiBuild {
                outcome: Box::new(build),
                termination,
                unresolved,
            });
        }
        Ok(build)
    }

    /// One escalation step for every open violation.
    fn escalate_round(&mut self) -> Result<(), PipelineError> {
        let mut groups: Vec<(Rule, Vec<IgnorelistEntry>)> = Vec::new();
        for v in self.state.violations.iter_mut().filter(|v| v.is_open()) {
            match next_scope(v) {
                Scope::Entry(entry) => match groups.iter_mut().find(|(r, _)| *r == entry.rule) {
                    Some((_, members)) => members.push(entry),
                    None => groups.push((entry.rule.clone(), vec![entry])),
                },
                Scope::Unresolvable => {
                    warn!("{}: no remaining scope; unresolvable", v.id);
                    for rule in self.state.ignorelist.entries_for(v.id).into_iter().map(|e| e.rule.clone()).collect::<Vec<_>>() {
                        self.state.ignorelist.retire(&rule, v.id);
                    }
                }
            }
        }
        for (rule, members) in groups {
            let ids: Vec<ViolationId> = members.iter().flat_map(|e| e.origins.clone()).collect();
            info!("trying {rule} for {}", ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", "));
            for entry in members {
                self.state.ignorelist.merge(entry);
            }
            let build = self.rebuild(RepairPhase::Test)?;
            let mut tests: Vec<String> = Vec::new();
            for id in &ids {
                for t in &self.state.violation(*id).expect("grouped violation exists").test_ids {
                    if !tests.contains(t) {
                        tests.push(t.clone());
                    }
                }
            }
            let results = run_suite(self.cfg, &self.mode, &build, Some(&tests))?;
            let keys: Vec<ViolationKey> = results
                .iter()
                .filter_map(|r| r.outcome.trap().filter(|t| t.is_cfi()))
                .cloned()
                .collect::<Vec<_>>()
                .iter()
                .map(|t| self.key_of(t))
                .collect();
            for id in &ids {
                let v = self
                    .state
                    .violations
                    .iter_mut()
                    .find(|v| v.id == *id)
                    .expect("grouped violation exists");
                let recurred = keys.contains(&v.key);
                record_outcome(v, &mut self.state.ignorelist, recurred);
                info!("{}: {rule} {}", v.id, if recurred { "did not help" } else { "suppressed the trap" });
            }
            self.absorb_traps(&results);
            self.write_ignorelist()?;
        }
        Ok(())
    }

    /// Declares every still-open violation unresolvable.
    fn abandon_open(&mut self) {
        for v in self.state.violations.iter_mut().filter(|v| v.is_open()) {
            warn!("{}: iteration budget exhausted", v.id);
            v.status = ViolationStatus::Unresolvable;
            for rule in self.state.ignorelist.entries_for(v.id).into_iter().map(|e| e.rule.clone()).collect::<Vec<_>>() {
                self.state.ignorelist.retire(&rule, v.id);
            }
        }
    }
}

fn is_bitcode(path: &Path) -> bool {
    use std::io::Read;
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .is_ok()
        && magic == *b"BC\xc0\xde"
}

fn walk(dir: &Path, skip: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path == skip || entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        let ty = entry.file_type()?;
        if ty.is_dir() {
            walk(&path, skip, out)?;
        } else if ty.is_file() {
            out.push(path);
        }
    }
    Ok(())
}

/// Census of the project's IR: `.ll` files if the build emits them,
/// otherwise bitcode objects disassembled with clang.
pub fn project_census(root: &Path, report_dir: &Path) -> io::Result<ModuleCensus> {
    let mut files = Vec::new();
    walk(root, report_dir, &mut files)?;
    files.sort();
    let textual: Vec<&PathBuf> = files.iter().filter(|p| p.extension().is_some_and(|e| e == "ll")).collect();
    let mut total = ModuleCensus::default();
    if !textual.is_empty() {
        for path in textual {
            total.absorb(analyze_module(&fs::read_to_string(path)?));
        }
        return Ok(total);
    }
    for path in files.iter().filter(|p| p.extension().is_some_and(|e| e == "o" || e == "bc")) {
        if !is_bitcode(path) {
            continue;
        }
        let out = Command::new("clang")
            .args(["-x", "ir", "-S", "-emit-llvm", "-o", "-"])
            .arg(path)
            .output();
        match out {
            Ok(o) if o.status.success() => total.absorb(analyze_module(&String::from_utf8_lossy(&o.stdout))),
            Ok(o) => warn!("cannot disassemble {}: {}", path.display(), String::from_utf8_lossy(&o.stderr).trim()),
            Err(e) => {
                warn!("cannot run clang for IR census: {e}");
                break;
            }
        }
    }
    Ok(total)
}

/// Runs the full loop on `cfg`.
pub fn heal(cfg: &ProjectConfig) -> Result<HealOutcome, PipelineError> {
    let findings = validate_config(cfg);
    if !findings.is_empty() {
        return Err(PipelineError::Config(findings));
    }
    let started = Instant::now();
    fs::create_dir_all(&cfg.report_dir)?;
    let lock = ProjectLock::acquire(&cfg.report_dir)?;
    let state = PipelineState::load(&cfg.report_dir)?.unwrap_or_default();
    let entries_before: BTreeSet<Rule> = state.ignorelist.active_rules().into_iter().collect();
    let patches_before = state.ledger.patches.len();
    let ignorelist_path = cfg.report_dir.join(IGNORELIST_FILE);
    let mut s = Session {
        cfg,
        lock,
        mode: BuildMode::Cfi {
            ignorelist: ignorelist_path.clone(),
            variants: cfg.cfi_variants.clone(),
        },
        ignorelist_path,
        builds: BuildSequence::new(),
        symbolizer: Symbolizer::default().with_project_root(&cfg.project_root),
        state,
        baseline: Vec::new(),
        build_time: 0.0,
    };
    s.state.phase = Phase::Building;
    s.write_ignorelist()?;
    s.save()?;

    let mut baseline_builds = BuildSequence::new();
    let base = run_build(cfg, &BuildMode::Baseline, &baseline_builds.next_request(), &s.lock)?;
    s.build_time += base.wall_time;
    if !base.succeeded {
        return Err(PipelineError::BaselineBuild(Box::new(base)));
    }
    s.baseline = run_suite(cfg, &BuildMode::Baseline, &base, None)?;

    let build = s.rebuild(RepairPhase::Build)?;
    s.save()?;

    s.state.phase = Phase::Testing;
    let mut cfi = run_suite(cfg, &s.mode, &build, None)?;
    let mut diff = diff_suites(&s.baseline, &cfi);
    s.absorb_traps(&cfi);
    s.state.refresh(Some(&diff));
    s.save()?;

    let mut rounds = 0u32;
    let mut exhausted = false;
    // nothing changed since the last full run: no confirmation needed
    let mut confirmed = s.state.open_violations.is_empty();
    while !confirmed {
        while s.state.violations.iter().any(Violation::is_open) {
            if rounds >= cfg.max_repair_iterations {
                s.abandon_open();
                exhausted = true;
                break;
            }
            rounds += 1;
            s.state.iteration += 1;
            s.state.phase = Phase::Analyzing;
            s.escalate_round()?;
            s.state.refresh(None);
            s.save()?;
        }
        s.state.phase = Phase::Testing;
        let build = s.rebuild(RepairPhase::Test)?;
        cfi = run_suite(cfg, &s.mode, &build, None)?;
        diff = diff_suites(&s.baseline, &cfi);
        let changed = s.absorb_traps(&cfi);
        s.state.refresh(Some(&diff));
        s.save()?;
        confirmed = changed == 0 || exhausted;
        if exhausted {
            s.abandon_open();
        }
    }
    s.state.phase = Phase::Done;
    s.write_ignorelist()?;
    s.state.refresh(Some(&diff));
    s.save()?;

    let ir = project_census(&cfg.project_root, &cfg.report_dir)?;
    write_diagnostics(&cfg.report_dir.join(CENSUS_DIAGNOSTICS_FILE), &ir.diagnostics)?;
    let functions: Vec<FunctionInfo> = ir.functions.iter().map(FunctionInfo::from).collect();
    let patches = read_journal(&cfg.report_dir)?;
    let rules = s.state.ignorelist.active_rules();
    let core = compute_coverage(&functions, &rules, &patches);
    let report = CoverageReport::assemble(
        &cfg.project_root,
        cfg.cfi_variants.iter().map(|v| v.as_str().to_string()).collect(),
        &core,
        ir.census,
        &s.state.violations,
        rules.iter().map(Rule::to_string).collect(),
        s.state.ledger.clone(),
        TestSummary::from_results(&s.baseline, &cfi, &diff),
        s.build_time,
        started.elapsed().as_secs_f64(),
    );
    emit_report(&report, &cfg.report_dir, &[ReportFormat::Json, ReportFormat::Html])?;

    let new_entries = rules.iter().filter(|r| !entries_before.contains(r)).count();
    Ok(HealOutcome {
        report,
        new_patches: s.state.ledger.patches.len() - patches_before,
        new_entries,
        exhausted,
        state: s.state,
    })
}
