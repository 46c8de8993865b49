//! Visibility repair for hidden-by-default builds.
//!
//! Linker diagnostics name the symbols that lost linkage. Each is located by
//! a textual scan of the project's C/C++ sources and its definition gets a
//! `visibility("default")` attribute. Patches are journalled to
//! `<report_dir>/visibility-patches.journal`, one record per line:
//!
//! ```text
//! <iteration>\t<file>\t<line>\t<symbol>
//! ```
//!
//! `file` is relative to the project root and `line` is 1-based. Revert
//! removes the attribute token from each journalled line.

use std::fs::{self, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use log::{info, warn};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::build::{run_build, BuildError, BuildMode, BuildOutcome, BuildSequence, Diagnostic, DiagnosticKind};
use crate::config::ProjectConfig;
use crate::lock::ProjectLock;
use crate::symbolize::demangle;

pub const ATTRIBUTE: &str = "__attribute__((visibility(\"default\"))) ";
pub const JOURNAL_FILE: &str = "visibility-patches.journal";

const SOURCE_EXTENSIONS: [&str; 5] = ["c", "cc", "cpp", "cxx", "C"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLocation {
    /// Relative to the project root.
    pub file: PathBuf,
    /// 1-based line where the declaration starts.
    pub line: usize,
    /// Byte column of the first declaration token on that line.
    pub column: usize,
    /// The line as it read when located.
    pub text: String,
    pub already_patched: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityPatch {
    pub symbol: String,
    /// The linker's spelling when it differs from `symbol`.
    pub mangled: Option<String>,
    pub file: PathBuf,
    pub line: usize,
    pub applied_text: String,
    pub iteration: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairPhase {
    Build,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairLedger {
    pub patches: Vec<VisibilityPatch>,
    pub iterations_build_phase: u32,
    pub iterations_test_phase: u32,
}

impl RepairLedger {
    pub fn iterations(&self) -> u32 {
        self.iterations_build_phase + self.iterations_test_phase
    }

    fn bump(&mut self, phase: RepairPhase) -> u32 {
        match phase {
            RepairPhase::Build => self.iterations_build_phase += 1,
            RepairPhase::Test => self.iterations_test_phase += 1,
        }
        self.iterations()
    }
}

#[derive(Debug, Error)]
pub enum LocateError {
    #[error("no definition of `{symbol}` found")]
    NotFound { symbol: String },
    #[error("`{symbol}` has {} candidate definitions", candidates.len())]
    Ambiguous { symbol: String, candidates: Vec<SourceLocation> },
    #[error("scanning sources: {0}")]
    Io(#[from] io::Error),
}

impl LocateError {
    pub fn candidates(&self) -> &[SourceLocation] {
        match self {
            LocateError::Ambiguous { candidates, .. } => candidates,
            _ => &[],
        }
    }
}

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("{file}:{line} changed since it was located")]
    Stale { file: PathBuf, line: usize },
    #[error("unwritable source {file}: {source}")]
    Unwritable {
        file: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("repair I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("malformed journal line {line}: {text}")]
    Journal { line: usize, text: String },
}

/// Symbols named by undefined-reference or hidden-symbol diagnostics, in
/// first-occurrence order without repeats.
pub fn extract_unresolved_symbols(diags: &[Diagnostic]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for d in diags {
        if !matches!(d.kind, DiagnosticKind::UndefinedReference | DiagnosticKind::HiddenSymbolMismatch) {
            continue;
        }
        if let Some(sym) = &d.symbol {
            if !out.contains(sym) {
                out.push(sym.clone());
            }
        }
    }
    out
}

/// The identifier to search for: demangled, without scope or parameters.
pub fn source_name(symbol: &str) -> String {
    let demangled = demangle(symbol);
    let mut depth = 0i32;
    let mut cut = demangled.len();
    for (i, c) in demangled.char_indices() {
        match c {
            '<' => depth += 1,
            '>' => depth -= 1,
            '(' if depth == 0 => {
                cut = i;
                break;
            }
            _ => {}
        }
    }
    let head = &demangled[..cut];
    let mut depth = 0i32;
    let mut start = 0;
    let bytes = head.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'<' => depth += 1,
            b'>' => depth -= 1,
            b':' if depth == 0 && bytes.get(i + 1) == Some(&b':') => {
                start = i + 2;
                i += 1;
            }
            _ => {}
        }
        i += 1;
    }
    let tail = &head[start..];
    tail.split('<').next().unwrap_or(tail).trim().to_string()
}

/// Blanks comments, literals and preprocessor lines, keeping byte offsets.
fn mask_source(text: &str) -> Vec<u8> {
    let src = text.as_bytes();
    let mut out = src.to_vec();
    let mut i = 0;
    let mut line_start = true;
    let blank = |out: &mut Vec<u8>, from: usize, to: usize| {
        for b in &mut out[from..to] {
            if *b != b'\n' {
                *b = b' ';
            }
        }
    };
    while i < src.len() {
        let c = src[i];
        if line_start && c == b'#' {
            let start = i;
            while i < src.len() && !(src[i] == b'\n' && src[i - 1] != b'\\') {
                i += 1;
            }
            blank(&mut out, start, i);
            continue;
        }
        if c == b'\n' {
            line_start = true;
            i += 1;
            continue;
        }
        if !c.is_ascii_whitespace() {
            line_start = false;
        }
        if c == b'/' && src.get(i + 1) == Some(&b'/') {
            let start = i;
            while i < src.len() && src[i] != b'\n' {
                i += 1;
            }
            blank(&mut out, start, i);
        } else if c == b'/' && src.get(i + 1) == Some(&b'*') {
            let start = i;
            i += 2;
            while i < src.len() && !(src[i] == b'*' && src.get(i + 1) == Some(&b'/')) {
                i += 1;
            }
            i = (i + 2).min(src.len());
            blank(&mut out, start, i);
        } else if c == b'"' || c == b'\'' {
            let start = i;
            i += 1;
            while i < src.len() && src[i] != c && src[i] != b'\n' {
                if src[i] == b'\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(src.len());
            blank(&mut out, start, i);
        } else {
            if !c.is_ascii() {
                out[i] = b' ';
            }
            i += 1;
        }
    }
    out
}

fn matching_paren(masked: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, &b) in masked.iter().enumerate().skip(open) {
        match b {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn skip_ws(masked: &[u8], mut i: usize) -> usize {
    while i < masked.len() && masked[i].is_ascii_whitespace() {
        i += 1;
    }
    i
}

fn is_ident(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Whether the parameter list closing at `close` is followed by a body.
fn opens_body(masked: &[u8], close: usize) -> bool {
    let mut i = skip_ws(masked, close + 1);
    // trailing qualifiers and attributes: `const`, `noexcept`, `__attribute__((..))`
    while i < masked.len() && is_ident(masked[i]) {
        while i < masked.len() && is_ident(masked[i]) {
            i += 1;
        }
        i = skip_ws(masked, i);
        if masked.get(i) == Some(&b'(') {
            match matching_paren(masked, i) {
                Some(c) => i = skip_ws(masked, c + 1),
                None => return false,
            }
        }
    }
    masked.get(i) == Some(&b'{')
}

/// Start of the declaration containing `pos`: just past the previous
/// top-level `;`, `{` or `}`.
fn declaration_start(masked: &[u8], pos: usize) -> usize {
    let boundary = masked[..pos]
        .iter()
        .rposition(|b| matches!(b, b';' | b'{' | b'}'))
        .map_or(0, |p| p + 1);
    skip_ws(masked, boundary)
}

fn scan_file(text: &str, name: &str) -> Vec<(usize, bool)> {
    let masked = mask_source(text);
    let Ok(re) = Regex::new(&format!(r"\b{}\b", regex::escape(name))) else {
        return Vec::new();
    };
    let masked_str = String::from_utf8_lossy(&masked).into_owned();
    let mut brace = 0i64;
    let mut paren = 0i64;
    let mut cursor = 0;
    let mut hits = Vec::new();
    for m in re.find_iter(&masked_str) {
        for &b in &masked[cursor..m.start()] {
            match b {
                b'{' => brace += 1,
                b'}' => brace -= 1,
                b'(' => paren += 1,
                b')' => paren -= 1,
                _ => {}
            }
        }
        cursor = m.start();
        if brace != 0 || paren != 0 {
            continue;
        }
        let after = skip_ws(&masked, m.end());
        let start = declaration_start(&masked, m.start());
        let prefix = &masked_str[start..m.start()];
        if prefix.trim().is_empty() {
            continue;
        }
        let words: Vec<&str> = prefix.split(|c: char| !c.is_ascii_alphanumeric() && c != '_').collect();
        if words.contains(&"typedef") {
            continue;
        }
        let is_def = match masked.get(after) {
            Some(b'(') => matching_paren(&masked, after).is_some_and(|c| opens_body(&masked, c)),
            Some(_) if words.contains(&"extern") => false,
            Some(_) => {
                let mut i = after;
                while masked.get(i) == Some(&b'[') {
                    i = masked[i..].iter().position(|&b| b == b']').map_or(masked.len(), |p| i + p + 1);
                    i = skip_ws(&masked, i);
                }
                matches!(masked.get(i), Some(b'=' | b';' | b','))
            }
            None => false,
        };
        if is_def {
            let patched = text[start..m.start()].contains("visibility(\"default\")")
                || text[..start].trim_end().ends_with(ATTRIBUTE.trim_end());
            hits.push((start, patched));
        }
    }
    hits
}

fn collect_sources(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        let ty = entry.file_type()?;
        let path = entry.path();
        if ty.is_dir() {
            collect_sources(&path, out)?;
        } else if ty.is_file()
            && path
                .extension()
                .is_some_and(|e| SOURCE_EXTENSIONS.iter().any(|x| e == *x))
        {
            out.push(path);
        }
    }
    Ok(())
}

fn location_at(root: &Path, path: &Path, text: &str, offset: usize, already_patched: bool) -> SourceLocation {
    let line_start = text[..offset].rfind('\n').map_or(0, |p| p + 1);
    let line_end = text[offset..].find('\n').map_or(text.len(), |p| offset + p);
    SourceLocation {
        file: path.strip_prefix(root).unwrap_or(path).to_path_buf(),
        line: text[..offset].matches('\n').count() + 1,
        column: offset - line_start,
        text: text[line_start..line_end].to_string(),
        already_patched,
    }
}

/// Finds the unique definition of `symbol` under `root`. Header files are
/// not searched.
pub fn locate_definition(symbol: &str, root: &Path) -> Result<SourceLocation, LocateError> {
    let name = source_name(symbol);
    let mut files = Vec::new();
    collect_sources(root, &mut files)?;
    let mut candidates = Vec::new();
    for path in files {
        let Ok(text) = fs::read_to_string(&path) else { continue };
        if !text.contains(name.as_str()) {
            continue;
        }
        for (offset, patched) in scan_file(&text, &name) {
            candidates.push(location_at(root, &path, &text, offset, patched));
        }
    }
    match candidates.len() {
        0 => Err(LocateError::NotFound { symbol: symbol.to_string() }),
        1 => Ok(candidates.remove(0)),
        _ => Err(LocateError::Ambiguous {
            symbol: symbol.to_string(),
            candidates,
        }),
    }
}

/// Inserts the attribute before the declaration at `loc`. An already
/// patched definition yields a patch with empty `applied_text`.
pub fn apply_visibility_default(
    root: &Path,
    loc: &SourceLocation,
    symbol: &str,
    iteration: u32,
) -> Result<VisibilityPatch, RepairError> {
    let name = source_name(symbol);
    let mut patch = VisibilityPatch {
        mangled: (name != symbol).then(|| symbol.to_string()),
        symbol: name,
        file: loc.file.clone(),
        line: loc.line,
        applied_text: String::new(),
        iteration,
    };
    let path = root.join(&loc.file);
    let text = fs::read_to_string(&path)?;
    let stale = || RepairError::Stale {
        file: loc.file.clone(),
        line: loc.line,
    };
    let line_start = if loc.line == 1 {
        0
    } else {
        text.match_indices('\n').nth(loc.line - 2).map(|(i, _)| i + 1).ok_or_else(stale)?
    };
    let line_end = text[line_start..].find('\n').map_or(text.len(), |p| line_start + p);
    if text[line_start..line_end] != loc.text || loc.column > loc.text.len() {
        return Err(stale());
    }
    let at = line_start + loc.column;
    if loc.already_patched || text[at..].starts_with(ATTRIBUTE) {
        return Ok(patch);
    }
    let mut patched = String::with_capacity(text.len() + ATTRIBUTE.len());
    patched.push_str(&text[..at]);
    patched.push_str(ATTRIBUTE);
    patched.push_str(&text[at..]);
    let mut file = OpenOptions::new()
        .write(true)
        .truncate(true)
        .open(&path)
        .map_err(|source| RepairError::Unwritable {
            file: loc.file.clone(),
            source,
        })?;
    file.write_all(patched.as_bytes())?;
    patch.applied_text = ATTRIBUTE.to_string();
    Ok(patch)
}

pub fn journal_path(report_dir: &Path) -> PathBuf {
    report_dir.join(JOURNAL_FILE)
}

pub fn append_journal(report_dir: &Path, patch: &VisibilityPatch) -> io::Result<()> {
    fs::create_dir_all(report_dir)?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(journal_path(report_dir))?;
    writeln!(
        f,
        "{}\t{}\t{}\t{}",
        patch.iteration,
        patch.file.display(),
        patch.line,
        patch.mangled.as_deref().unwrap_or(&patch.symbol)
    )
}

/// Reads the journal back as patch records. A missing journal is empty.
pub fn read_journal(report_dir: &Path) -> Result<Vec<VisibilityPatch>, RepairError> {
    let text = match fs::read_to_string(journal_path(report_dir)) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || RepairError::Journal {
            line: n + 1,
            text: line.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [iteration, file, lineno, symbol] = fields[..] else {
            return Err(bad());
        };
        let name = source_name(symbol);
        out.push(VisibilityPatch {
            mangled: (name != symbol).then(|| symbol.to_string()),
            symbol: name,
            file: PathBuf::from(file),
            line: lineno.parse().map_err(|_| bad())?,
            applied_text: ATTRIBUTE.to_string(),
            iteration: iteration.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Undoes every journalled patch and empties the journal. Returns how many
/// attribute tokens were removed.
pub fn revert_patches(root: &Path, report_dir: &Path) -> Result<usize, RepairError> {
    let patches = read_journal(report_dir)?;
    let mut removed = 0;
    for patch in patches.iter().rev() {
        let path = root.join(&patch.file);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                warn!("cannot revert {}: {e}", patch.file.display());
                continue;
            }
        };
        let mut lines: Vec<&str> = text.split('\n').collect();
        let Some(line) = lines.get(patch.line - 1).copied() else {
            warn!("{}:{} no longer exists", patch.file.display(), patch.line);
            continue;
        };
        if !line.contains(ATTRIBUTE) {
            warn!("{}:{} carries no attribute to revert", patch.file.display(), patch.line);
            continue;
        }
        let restored = line.replacen(ATTRIBUTE, "", 1);
        lines[patch.line - 1] = &restored;
        let joined = lines.join("\n");
        fs::write(&path, joined).map_err(|source| RepairError::Unwritable {
            file: patch.file.clone(),
            source,
        })?;
        removed += 1;
    }
    let journal = journal_path(report_dir);
    if journal.exists() {
        fs::write(journal, "")?;
    }
    Ok(removed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Built,
    NoProgress,
    Exhausted,
}

#[derive(Debug)]
pub struct RepairOutcome {
    pub build: BuildOutcome,
    pub termination: Termination,
    /// Symbols that could not be located in the last failed iteration.
    pub unresolved: Vec<String>,
    pub new_patches: usize,
    /// Summed wall time of every build in the loop.
    pub build_time: f64,
}

/// Builds, patching and rebuilding until the build succeeds, an iteration
/// makes no progress, or `max_repair_iterations` patching iterations ran.
pub fn repair_until_buildable(
    cfg: &ProjectConfig,
    mode: &BuildMode,
    phase: RepairPhase,
    ledger: &mut RepairLedger,
    builds: &mut BuildSequence,
    lock: &ProjectLock,
) -> Result<RepairOutcome, RepairError> {
    let mut rounds = 0u32;
    let mut new_patches = 0;
    let mut build_time = 0.0;
    loop {
        let outcome = run_build(cfg, mode, &builds.next_request(), lock)?;
        build_time += outcome.wall_time;
        if outcome.succeeded {
            return Ok(RepairOutcome {
                build: outcome,
                termination: Termination::Built,
                unresolved: Vec::new(),
                new_patches,
                build_time,
            });
        }
        if rounds >= cfg.max_repair_iterations {
            return Ok(RepairOutcome {
                unresolved: extract_unresolved_symbols(&outcome.diagnostics),
                build: outcome,
                termination: Termination::Exhausted,
                new_patches,
                build_time,
            });
        }
        let symbols = extract_unresolved_symbols(&outcome.diagnostics);
        let mut applied = Vec::new();
        let mut unresolved = Vec::new();
        for symbol in &symbols {
            match patch_symbol(&cfg.project_root, symbol, ledger.iterations() + 1) {
                Ok(Some(patch)) => applied.push(patch),
                Ok(None) => unresolved.push(symbol.clone()),
                Err(LocateOrRepair::Locate(e)) => {
                    warn!("{e}");
                    for c in e.candidates() {
                        warn!("  candidate {}:{}", c.file.display(), c.line);
                    }
                    unresolved.push(symbol.clone());
                }
                Err(LocateOrRepair::Repair(e)) => return Err(e),
            }
        }
        if applied.is_empty() {
            return Ok(RepairOutcome {
                build: outcome,
                termination: Termination::NoProgress,
                unresolved,
                new_patches,
                build_time,
            });
        }
        rounds += 1;
        let iteration = ledger.bump(phase);
        for mut patch in applied {
            patch.iteration = iteration;
            info!("exported {} at {}:{}", patch.symbol, patch.file.display(), patch.line);
            append_journal(&cfg.report_dir, &patch)?;
            ledger.patches.push(patch);
            new_patches += 1;
        }
    }
}

enum LocateOrRepair {
    Locate(LocateError),
    Repair(RepairError),
}

/// Locates and patches one symbol. `Ok(None)` when the definition already
/// carries the attribute.
fn patch_symbol(root: &Path, symbol: &str, iteration: u32) -> Result<Option<VisibilityPatch>, LocateOrRepair> {
    let mut retried = false;
    loop {
        let loc = locate_definition(symbol, root).map_err(LocateOrRepair::Locate)?;
        match apply_visibility_default(root, &loc, symbol, iteration) {
            Ok(p) if p.applied_text.is_empty() => return Ok(None),
            Ok(p) => return Ok(Some(p)),
            Err(RepairError::Stale { .. }) if !retried => retried = true,
            Err(e) => return Err(LocateOrRepair::Repair(e)),
        }
    }
}
