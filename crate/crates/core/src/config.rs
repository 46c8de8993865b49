//! Per-project configuration.
//!
//! The configuration is a TOML document:
//!
//! ```toml
//! project_root = "."
//! configure_cmd = "./configure"      # optional
//! build_cmd = "make"
//! clean_cmd = "make clean"           # optional
//! test_cmd = "./list-tests.sh"
//! executables = ["bin/app"]
//! cfi_variants = ["cfi-icall"]
//! extra_compile_flags = ["-O0", "-g"]
//! test_timeout = 120                 # seconds, optional
//! report_dir = "cfi-report"
//! max_repair_iterations = 64         # optional
//! ```
//!
//! `parse_config` keeps paths exactly as written so that `render_config`
//! reproduces the same document. [`load_config`] additionally resolves a
//! relative `project_root` against the directory holding the file and a
//! relative `report_dir` against the project root.

use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEST_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_MAX_REPAIR_ITERATIONS: u32 = 64;

/// One of LLVM's forward-edge CFI checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CfiVariant {
    ICall,
    VCall,
    NvCall,
    MfCall,
    CastStrict,
    DerivedCast,
    UnrelatedCast,
}

impl CfiVariant {
    pub const ALL: [CfiVariant; 7] = [
        CfiVariant::ICall,
        CfiVariant::VCall,
        CfiVariant::NvCall,
        CfiVariant::MfCall,
        CfiVariant::CastStrict,
        CfiVariant::DerivedCast,
        CfiVariant::UnrelatedCast,
    ];

    /// The name accepted by `-fsanitize=`.
    pub fn as_str(self) -> &'static str {
        match self {
            CfiVariant::ICall => "cfi-icall",
            CfiVariant::VCall => "cfi-vcall",
            CfiVariant::NvCall => "cfi-nvcall",
            CfiVariant::MfCall => "cfi-mfcall",
            CfiVariant::CastStrict => "cfi-cast-strict",
            CfiVariant::DerivedCast => "cfi-derived-cast",
            CfiVariant::UnrelatedCast => "cfi-unrelated-cast",
        }
    }
}

impl fmt::Display for CfiVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CfiVariant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CfiVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ConfigError::UnknownVariant(s.to_string()))
    }
}

impl TryFrom<String> for CfiVariant {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CfiVariant> for String {
    fn from(v: CfiVariant) -> String {
        v.as_str().to_string()
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown CFI variant `{0}`")]
    UnknownVariant(String),
    #[error("duplicate CFI variant `{0}`")]
    DuplicateVariant(CfiVariant),
    #[error("max_repair_iterations must be at least 1")]
    ZeroIterations,
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub project_root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configure_cmd: Option<String>,
    pub build_cmd: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_cmd: Option<String>,
    pub test_cmd: String,
    #[serde(default)]
    pub executables: Vec<PathBuf>,
    pub cfi_variants: Vec<CfiVariant>,
    #[serde(default)]
    pub extra_compile_flags: Vec<String>,
    #[serde(default = "default_timeout")]
    pub test_timeout: u64,
    pub report_dir: PathBuf,
    #[serde(default = "default_iterations")]
    pub max_repair_iterations: u32,
}

fn default_timeout() -> u64 {
    DEFAULT_TEST_TIMEOUT_SECS
}

fn default_iterations() -> u32 {
    DEFAULT_MAX_REPAIR_ITERATIONS
}

/// Raw document shape; variants stay strings so unknown names can be
/// reported by token instead of through serde's generic message.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    project_root: PathBuf,
    configure_cmd: Option<String>,
    build_cmd: String,
    clean_cmd: Option<String>,
    test_cmd: String,
    #[serde(default)]
    executables: Vec<PathBuf>,
    cfi_variants: Vec<String>,
    #[serde(default)]
    extra_compile_flags: Vec<String>,
    #[serde(default = "default_timeout")]
    test_timeout: u64,
    report_dir: PathBuf,
    #[serde(default = "default_iterations")]
    max_repair_iterations: u32,
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |nl| before.len() - nl - 1) + 1;
    (line, column)
}

pub fn parse_config(text: &str) -> Result<ProjectConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_column(text, span.start))
            .unwrap_or((1, 1));
        ConfigError::Syntax {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;

    let mut variants = Vec::with_capacity(raw.cfi_variants.len());
    for token in &raw.cfi_variants {
        let variant: CfiVariant = token.parse()?;
        if variants.contains(&variant) {
            return Err(ConfigError::DuplicateVariant(variant));
        }
        variants.push(variant);
    }
    if raw.max_repair_iterations == 0 {
        return Err(ConfigError::ZeroIterations);
    }

    Ok(ProjectConfig {
        project_root: raw.project_root,
        configure_cmd: raw.configure_cmd,
        build_cmd: raw.build_cmd,
        clean_cmd: raw.clean_cmd,
        test_cmd: raw.test_cmd,
        executables: raw.executables,
        cfi_variants: variants,
        extra_compile_flags: raw.extra_compile_flags,
        test_timeout: raw.test_timeout,
        report_dir: raw.report_dir,
        max_repair_iterations: raw.max_repair_iterations,
    })
}

pub fn render_config(cfg: &ProjectConfig) -> String {
    toml::to_string(cfg).expect("ProjectConfig always serializes")
}

/// Reads and parses a config file, anchoring relative paths.
pub fn load_config(path: &Path) -> Result<ProjectConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = parse_config(&text)?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    if cfg.project_root.is_relative() {
        cfg.project_root = base.join(&cfg.project_root);
    }
    if let Ok(canonical) = cfg.project_root.canonicalize() {
        cfg.project_root = canonical;
    }
    if cfg.report_dir.is_relative() {
        cfg.report_dir = cfg.project_root.join(&cfg.report_dir);
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Finding {
    RootMissing(PathBuf),
    RootNotDirectory(PathBuf),
    EmptyCommand(&'static str),
    NoVariants,
    ExecutableOutsideRoot(PathBuf),
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::RootMissing(p) => write!(f, "root missing: {}", p.display()),
            Finding::RootNotDirectory(p) => write!(f, "root is not a directory: {}", p.display()),
            Finding::EmptyCommand(field) => write!(f, "empty command: {field}"),
            Finding::NoVariants => f.write_str("at least one variant required"),
            Finding::ExecutableOutsideRoot(p) => {
                write!(f, "executable outside project root: {}", p.display())
            }
        }
    }
}

/// True when `rel` is a relative path that never climbs above its base.
pub(crate) fn stays_under_root(rel: &Path) -> bool {
    let mut depth: i64 = 0;
    for component in rel.components() {
        match component {
            Component::Normal(_) => depth += 1,
            Component::CurDir => {}
            Component::ParentDir => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            Component::RootDir | Component::Prefix(_) => return false,
        }
    }
    true
}

pub fn validate_config(cfg: &ProjectConfig) -> Vec<Finding> {
    let mut findings = Vec::new();
    if !cfg.project_root.exists() {
        findings.push(Finding::RootMissing(cfg.project_root.clone()));
    } else if !cfg.project_root.is_dir() {
        findings.push(Finding::RootNotDirectory(cfg.project_root.clone()));
    }
    let commands = [
        ("build_cmd", Some(&cfg.build_cmd)),
        ("test_cmd", Some(&cfg.test_cmd)),
        ("configure_cmd", cfg.configure_cmd.as_ref()),
        ("clean_cmd", cfg.clean_cmd.as_ref()),
    ];
    for (field, cmd) in commands {
        if cmd.is_some_and(|c| c.trim().is_empty()) {
            findings.push(Finding::EmptyCommand(field));
        }
    }
    if cfg.cfi_variants.is_empty() {
        findings.push(Finding::NoVariants);
    }
    for exe in &cfg.executables {
        if !stays_under_root(exe) {
            findings.push(Finding::ExecutableOutsideRoot(exe.clone()));
        }
    }
    findings
}
