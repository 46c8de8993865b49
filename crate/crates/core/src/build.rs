//! Baseline and CFI builds.
//!
//! Compiler flags reach the project's build system through `CFLAGS`,
//! `CXXFLAGS` and `LDFLAGS` (and `CFI_HEAL_FLAGS`), and through a literal
//! `{FLAGS}` placeholder in `configure_cmd` / `build_cmd` for build systems
//! that ignore the environment. Commands run under `sh -c` from the project
//! root so that `src:` ignorelist paths match what the compiler sees.
//!
//! Linker output is scanned with two grammars:
//!
//! * GNU ld: ``undefined reference to `SYM'``, ``hidden symbol `SYM' isn't
//!   defined``, ``hidden symbol `SYM' in OBJ is referenced by DSO``
//! * LLD: `error: undefined symbol: SYM`, `error: undefined hidden symbol: SYM`,
//!   with the object taken from the following `>>> referenced by` line.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::LazyLock;
use std::time::Instant;

use log::{debug, info};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CfiVariant, ProjectConfig};
use crate::lock::ProjectLock;

/// Raw logs beyond this size are cut and marked.
pub const LOG_CAP_BYTES: usize = 64 * 1024 * 1024;
pub const TRUNCATION_MARKER: &str = "\n[cfi-heal: build log truncated at 67108864 bytes]\n";

pub const FLAGS_PLACEHOLDER: &str = "{FLAGS}";

/// Keeps frame-pointer chains intact so traps can be unwound without DWARF.
pub const FRAME_POINTER_FLAG: &str = "-fno-omit-frame-pointer";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildMode {
    Baseline,
    Cfi {
        ignorelist: PathBuf,
        variants: Vec<CfiVariant>,
    },
}

impl BuildMode {
    pub fn label(&self) -> &'static str {
        match self {
            BuildMode::Baseline => "baseline",
            BuildMode::Cfi { .. } => "cfi",
        }
    }

    pub fn is_cfi(&self) -> bool {
        matches!(self, BuildMode::Cfi { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiagnosticKind {
    UndefinedReference,
    HiddenSymbolMismatch,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub symbol: Option<String>,
    pub source_object: Option<PathBuf>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildOutcome {
    pub succeeded: bool,
    #[serde(skip)]
    pub raw_log: String,
    pub diagnostics: Vec<Diagnostic>,
    pub produced_executables: Vec<PathBuf>,
    pub wall_time: f64,
    pub log_path: Option<PathBuf>,
}

/// Per-invocation knobs that are not part of the mode.
#[derive(Clone, Debug)]
pub struct BuildRequest {
    pub iteration: u32,
    pub run_configure: bool,
}

impl Default for BuildRequest {
    fn default() -> Self {
        BuildRequest {
            iteration: 1,
            run_configure: true,
        }
    }
}

/// Numbers successive builds of one mode; only the first runs configure.
#[derive(Clone, Debug, Default)]
pub struct BuildSequence {
    issued: u32,
}

impl BuildSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_request(&mut self) -> BuildRequest {
        self.issued += 1;
        BuildRequest {
            iteration: self.issued,
            run_configure: self.issued == 1,
        }
    }

    pub fn issued(&self) -> u32 {
        self.issued
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("CFI build requires at least one variant")]
    NoVariants,
    #[error("CFI build requires an ignorelist path")]
    MissingIgnorelist,
    #[error("ignorelist {0} does not exist")]
    IgnorelistAbsent(PathBuf),
    #[error("`{command}` could not be executed (status {status})")]
    NotExecutable { command: String, status: i32 },
    #[error("`{command}` failed to start: {source}")]
    Spawn {
        command: String,
        #[source]
        source: io::Error,
    },
    #[error("build I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Flags for `mode`, with `extra` appended last.
pub fn compose_flags(mode: &BuildMode, extra: &[String]) -> Result<Vec<String>, BuildError> {
    let mut flags = Vec::new();
    if let BuildMode::Cfi {
        ignorelist,
        variants,
    } = mode
    {
        if variants.is_empty() {
            return Err(BuildError::NoVariants);
        }
        if ignorelist.as_os_str().is_empty() {
            return Err(BuildError::MissingIgnorelist);
        }
        let joined = variants
            .iter()
            .map(|v| v.as_str())
            .collect::<Vec<_>>()
            .join(",");
        flags.push("-flto".to_string());
        flags.push("-fvisibility=hidden".to_string());
        flags.push(format!("-fsanitize={joined}"));
        flags.push(format!("-fsanitize-ignorelist={}", ignorelist.display()));
        flags.push(FRAME_POINTER_FLAG.to_string());
    }
    flags.extend(extra.iter().cloned());
    Ok(flags)
}

static GNU_UNDEFINED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?:^|\s)(?:(?P<obj>[^\s:]+)(?::\([^)]*\))?: )?undefined reference to [`‘'](?P<sym>[^'’]+)['’]",
    )
    .unwrap()
});
static GNU_HIDDEN_UNDEFINED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"hidden symbol [`‘'](?P<sym>[^'’]+)['’] isn't defined").unwrap()
});
static GNU_HIDDEN_DSO: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"hidden symbol [`‘'](?P<sym>[^'’]+)['’] in (?P<obj>\S+) is referenced by DSO")
        .unwrap()
});
static LLD_UNDEFINED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"error: undefined (?P<hidden>hidden )?symbol: (?P<sym>.+?)\s*$").unwrap()
});
static LLD_REFERENCED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^>>> referenced by (?P<obj>\S+)").unwrap());
static OTHER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:^|\s|:)(?:fatal )?error:|\bwarning:").unwrap());

/// Maps linker and compiler output to diagnostics. Pure and line-oriented:
/// duplicated lines yield duplicated diagnostics.
pub fn parse_diagnostics(raw_log: &str) -> Vec<Diagnostic> {
    let mut out: Vec<Diagnostic> = Vec::new();
    // index of the last LLD undefined-symbol diagnostic awaiting its object
    let mut pending_lld: Option<usize> = None;

    for line in raw_log.lines() {
        let trimmed = line.trim_end();
        if let Some(idx) = pending_lld {
            if let Some(c) = LLD_REFERENCED.captures(trimmed) {
                out[idx].source_object = Some(PathBuf::from(&c["obj"]));
                pending_lld = None;
                continue;
            }
            if trimmed.starts_with(">>>") {
                continue;
            }
            pending_lld = None;
        }

        if let Some(c) = GNU_HIDDEN_DSO.captures(trimmed) {
            out.push(Diagnostic {
                kind: DiagnosticKind::HiddenSymbolMismatch,
                symbol: Some(c["sym"].to_string()),
                source_object: Some(PathBuf::from(&c["obj"])),
                message: trimmed.to_string(),
            });
        } else if let Some(c) = GNU_HIDDEN_UNDEFINED.captures(trimmed) {
            out.push(Diagnostic {
                kind: DiagnosticKind::HiddenSymbolMismatch,
                symbol: Some(c["sym"].to_string()),
                source_object: None,
                message: trimmed.to_string(),
            });
        } else if let Some(c) = GNU_UNDEFINED.captures(trimmed) {
            out.push(Diagnostic {
                kind: DiagnosticKind::UndefinedReference,
                symbol: Some(c["sym"].to_string()),
                source_object: c.name("obj").map(|m| PathBuf::from(m.as_str())),
                message: trimmed.to_string(),
            });
        } else if let Some(c) = LLD_UNDEFINED.captures(trimmed) {
            let kind = if c.name("hidden").is_some() {
                DiagnosticKind::HiddenSymbolMismatch
            } else {
                DiagnosticKind::UndefinedReference
            };
            out.push(Diagnostic {
                kind,
                symbol: Some(c["sym"].to_string()),
                source_object: None,
                message: trimmed.to_string(),
            });
            pending_lld = Some(out.len() - 1);
        } else if OTHER.is_match(trimmed) {
            out.push(Diagnostic {
                kind: DiagnosticKind::Other,
                symbol: None,
                source_object: None,
                message: trimmed.to_string(),
            });
        }
    }
    out
}

fn cap_log(mut bytes: Vec<u8>) -> String {
    if bytes.len() > LOG_CAP_BYTES {
        bytes.truncate(LOG_CAP_BYTES);
        let mut text = String::from_utf8_lossy(&bytes).into_owned();
        text.push_str(TRUNCATION_MARKER);
        text
    } else {
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

pub fn is_truncated(raw_log: &str) -> bool {
    raw_log.ends_with(TRUNCATION_MARKER)
}

/// Runs `command` under `sh -c` in `dir`, appending combined output to `log`.
/// Returns the exit code (signal terminations map to 128 + signo).
fn run_step(
    command: &str,
    dir: &Path,
    env: &[(&str, String)],
    log: &File,
) -> Result<i32, BuildError> {
    debug!("running `{command}` in {}", dir.display());
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(command)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log.try_clone()?);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let status = cmd
        .status()
        .map_err(|source| BuildError::Spawn {
            command: command.to_string(),
            source,
        })?;
    use std::os::unix::process::ExitStatusExt;
    let code = status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0));
    if code == 126 || code == 127 {
        return Err(BuildError::NotExecutable {
            command: command.to_string(),
            status: code,
        });
    }
    Ok(code)
}

/// Performs one full build (clean, optional configure, build) of the project.
///
/// A failing build is reported through `BuildOutcome::succeeded`, not as an
/// error. The caller must hold the project lock.
pub fn run_build(
    cfg: &ProjectConfig,
    mode: &BuildMode,
    request: &BuildRequest,
    _lock: &ProjectLock,
) -> Result<BuildOutcome, BuildError> {
    if let BuildMode::Cfi { ignorelist, .. } = mode {
        if !ignorelist.exists() {
            return Err(BuildError::IgnorelistAbsent(ignorelist.clone()));
        }
    }
    let flags = compose_flags(mode, &cfg.extra_compile_flags)?;
    let joined = flags.join(" ");
    let env = [
        ("CFLAGS", joined.clone()),
        ("CXXFLAGS", joined.clone()),
        ("LDFLAGS", joined.clone()),
        ("CFI_HEAL_FLAGS", joined.clone()),
    ];

    let started = Instant::now();
    let mut sink = tempfile::tempfile()?;
    let root = &cfg.project_root;
    let mut exit = 0;
    let mut steps: Vec<String> = Vec::new();
    if let Some(clean) = &cfg.clean_cmd {
        steps.push(clean.clone());
    }
    if request.run_configure {
        if let Some(configure) = &cfg.configure_cmd {
            steps.push(configure.replace(FLAGS_PLACEHOLDER, &joined));
        }
    }
    steps.push(cfg.build_cmd.replace(FLAGS_PLACEHOLDER, &joined));
    for (i, step) in steps.iter().enumerate() {
        let code = run_step(step, root, &env, &sink)?;
        // a failing clean step is tolerated: the tree may already be clean
        let is_clean = i == 0 && cfg.clean_cmd.is_some();
        if code != 0 && !is_clean {
            exit = code;
            break;
        }
    }

    use std::io::Seek;
    sink.seek(io::SeekFrom::Start(0))?;
    let mut bytes = Vec::new();
    sink.read_to_end(&mut bytes)?;
    let raw_log = cap_log(bytes);

    let mut diagnostics = parse_diagnostics(&raw_log);
    let produced: Vec<PathBuf> = cfg
        .executables
        .iter()
        .map(|e| root.join(e))
        .filter(|p| p.exists())
        .collect();
    let mut succeeded = exit == 0;
    if succeeded && produced.len() != cfg.executables.len() {
        succeeded = false;
        for exe in &cfg.executables {
            if !root.join(exe).exists() {
                diagnostics.push(Diagnostic {
                    kind: DiagnosticKind::Other,
                    symbol: None,
                    source_object: None,
                    message: format!("configured executable {} was not produced", exe.display()),
                });
            }
        }
    }

    fs::create_dir_all(&cfg.report_dir)?;
    let log_path = cfg
        .report_dir
        .join(format!("build-{}-{}.log", mode.label(), request.iteration));
    fs::write(&log_path, &raw_log)?;

    let wall_time = started.elapsed().as_secs_f64();
    info!(
        "{} build #{} {} in {:.1}s",
        mode.label(),
        request.iteration,
        if succeeded { "succeeded" } else { "failed" },
        wall_time
    );
    Ok(BuildOutcome {
        succeeded,
        raw_log,
        diagnostics,
        produced_executables: produced,
        wall_time,
        log_path: Some(log_path),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfi(path: &str, variants: Vec<CfiVariant>) -> BuildMode {
        BuildMode::Cfi {
            ignorelist: PathBuf::from(path),
            variants,
        }
    }

    #[test]
    fn baseline_has_no_cfi_flags() {
        assert!(compose_flags(&BuildMode::Baseline, &[]).unwrap().is_empty());
        let extra = vec!["-O1".to_string()];
        assert_eq!(compose_flags(&BuildMode::Baseline, &extra).unwrap(), extra);
    }

    #[test]
    fn icall_flags() {
        let flags = compose_flags(&cfi("P", vec![CfiVariant::ICall]), &[]).unwrap();
        assert_eq!(
            &flags[..4],
            [
                "-flto",
                "-fvisibility=hidden",
                "-fsanitize=cfi-icall",
                "-fsanitize-ignorelist=P"
            ]
        );
        assert_eq!(flags[4], FRAME_POINTER_FLAG);
        assert_eq!(flags.len(), 5);
    }

    #[test]
    fn all_variants_once() {
        let flags = compose_flags(&cfi("P", CfiVariant::ALL.to_vec()), &["-g".into()]).unwrap();
        let sanitize = flags.iter().find(|f| f.starts_with("-fsanitize=")).unwrap();
        let names: Vec<_> = sanitize["-fsanitize=".len()..].split(',').collect();
        for v in CfiVariant::ALL {
            assert_eq!(names.iter().filter(|n| **n == v.as_str()).count(), 1);
        }
        assert_eq!(flags.last().unwrap(), "-g");
    }

    #[test]
    fn cfi_contract_violations() {
        assert!(matches!(
            compose_flags(&cfi("P", vec![]), &[]),
            Err(BuildError::NoVariants)
        ));
        assert!(matches!(
            compose_flags(&cfi("", vec![CfiVariant::ICall]), &[]),
            Err(BuildError::MissingIgnorelist)
        ));
    }

    // Captured from GNU ld 2.38 and LLD 14 linking the two-library fixture.
    const GNU_LOG: &str = "/usr/bin/ld: /tmp/lto-llvm-58f262.o: in function `main':\n\
        ld-temp.o:(.text.main+0x15): undefined reference to `b_api'\n\
        clang: error: linker command failed with exit code 1 (use -v to see invocation)\n";
    const LLD_LOG: &str = "ld.lld: error: undefined symbol: a_api\n\
        >>> referenced by ld-temp.o\n\
        >>>               lto.tmp:(b_api)\n\
        >>> did you mean: b_api\n\
        >>> defined in: lto.tmp\n";

    #[test]
    fn gnu_undefined_reference() {
        let diags = parse_diagnostics(GNU_LOG);
        assert_eq!(diags.len(), 2);
        assert_eq!(diags[0].kind, DiagnosticKind::UndefinedReference);
        assert_eq!(diags[0].symbol.as_deref(), Some("b_api"));
        assert_eq!(diags[0].source_object.as_deref(), Some(Path::new("ld-temp.o")));
        assert_eq!(diags[1].kind, DiagnosticKind::Other);
    }

    #[test]
    fn lld_undefined_symbol() {
        let diags = parse_diagnostics(LLD_LOG);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].kind, DiagnosticKind::UndefinedReference);
        assert_eq!(diags[0].symbol.as_deref(), Some("a_api"));
        assert_eq!(diags[0].source_object.as_deref(), Some(Path::new("ld-temp.o")));
    }

    #[test]
    fn hidden_symbol_grammars() {
        let log = "/usr/bin/ld: libh.so: hidden symbol `hid' isn't defined\n\
                   /usr/bin/ld: hidden symbol `_ZN2ns3fooEv' in foo.o is referenced by DSO\n\
                   ld.lld: error: undefined hidden symbol: hid\n\
                   >>> referenced by h.c\n";
        let diags = parse_diagnostics(log);
        let kinds: Vec<_> = diags.iter().map(|d| d.kind).collect();
        assert_eq!(kinds, vec![DiagnosticKind::HiddenSymbolMismatch; 3]);
        assert_eq!(diags[1].symbol.as_deref(), Some("_ZN2ns3fooEv"));
        assert_eq!(diags[1].source_object.as_deref(), Some(Path::new("foo.o")));
        assert_eq!(diags[2].source_object.as_deref(), Some(Path::new("h.c")));
    }

    #[test]
    fn empty_and_duplicates() {
        assert!(parse_diagnostics("").is_empty());
        let line = "main.c:(.text+0x5): undefined reference to `foo'\n";
        let diags = parse_diagnostics(&line.repeat(2));
        assert_eq!(diags.len(), 2);
        assert!(diags.iter().all(|d| d.symbol.as_deref() == Some("foo")));
    }

    #[test]
    fn demangled_names_kept_verbatim() {
        let diags = parse_diagnostics("x.cc:(.text+0x1): undefined reference to `ns::foo(int)'\n");
        assert_eq!(diags[0].symbol.as_deref(), Some("ns::foo(int)"));
    }

    #[test]
    fn truncation_is_marked() {
        let text = cap_log(vec![b'a'; LOG_CAP_BYTES + 10]);
        assert!(is_truncated(&text));
        assert!(!is_truncated(&cap_log(b"short".to_vec())));
    }

    proptest! {
        #[test]
        fn reparse_is_stable(lines in proptest::collection::vec(
            prop_oneof![
                Just("ld-temp.o:(.text+0x1): undefined reference to `foo'".to_string()),
                Just("ld.lld: error: undefined symbol: bar".to_string()),
                Just(">>> referenced by x.o".to_string()),
                Just("cc: warning: unused".to_string()),
                "[a-z :]{0,20}",
            ], 0..12)) {
            let log = lines.join("\n");
            let first = parse_diagnostics(&log);
            prop_assert_eq!(&parse_diagnostics(&log), &first);
        }

        #[test]
        fn baseline_and_cfi_differ_by_cfi_flags(extra in proptest::collection::vec("-[a-z]{1,6}", 0..5)) {
            let base = compose_flags(&BuildMode::Baseline, &extra).unwrap();
            let full = compose_flags(&cfi("list", vec![CfiVariant::ICall, CfiVariant::VCall]), &extra).unwrap();
            prop_assert_eq!(&full[full.len() - extra.len()..], &base[..]);
            prop_assert_eq!(full.len() - base.len(), 5);
            let again = compose_flags(&cfi("list", vec![CfiVariant::ICall, CfiVariant::VCall]), &extra).unwrap();
            prop_assert_eq!(full, again);
        }
    }
}
