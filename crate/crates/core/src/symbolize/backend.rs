//! Adapters to external disassemblers.
//!
//! A backend answers queries about one binary with line-oriented records:
//!
//! ```text
//! func <start-hex> <size-hex or -> <name or ->
//! ```
//!
//! `FunctionStarts` returns every address the backend believes begins a
//! function. Sizes and names are optional; the symbolizer turns starts into
//! spans itself.

use std::path::Path;
use std::process::Command;
use std::sync::LazyLock;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    FunctionStarts,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackendRecord {
    pub start: u64,
    pub size: Option<u64>,
    pub name: Option<String>,
}

impl BackendRecord {
    pub fn to_line(&self) -> String {
        format!(
            "func {:x} {} {}",
            self.start,
            self.size.map_or("-".to_string(), |s| format!("{s:x}")),
            self.name.as_deref().unwrap_or("-")
        )
    }

    pub fn parse_line(line: &str) -> Option<BackendRecord> {
        let mut parts = line.split_whitespace();
        if parts.next()? != "func" {
            return None;
        }
        let start = u64::from_str_radix(parts.next()?, 16).ok()?;
        let size = match parts.next()? {
            "-" => None,
            s => Some(u64::from_str_radix(s, 16).ok()?),
        };
        let name = match parts.next() {
            None | Some("-") => None,
            Some(n) => Some(n.to_string()),
        };
        Some(BackendRecord { start, size, name })
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{tool} is not available: {source}")]
    Unavailable {
        tool: &'static str,
        #[source]
        source: std::io::Error,
    },
    #[error("{tool} failed on {binary}: {stderr}")]
    Failed {
        tool: &'static str,
        binary: String,
        stderr: String,
    },
    #[error("unreadable {tool} output: {detail}")]
    Output { tool: &'static str, detail: String },
}

pub trait DisassemblyBackend {
    fn name(&self) -> &'static str;

    fn query(&self, binary: &Path, kind: QueryKind) -> Result<Vec<BackendRecord>, BackendError>;
}

fn run_tool(tool: &'static str, args: &[&str], binary: &Path) -> Result<String, BackendError> {
    let output = Command::new(tool)
        .args(args)
        .arg(binary)
        .output()
        .map_err(|source| BackendError::Unavailable { tool, source })?;
    if !output.status.success() {
        return Err(BackendError::Failed {
            tool,
            binary: binary.display().to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

/// radare2: `aa` analysis followed by the JSON function list.
#[derive(Clone, Debug, Default)]
pub struct Radare2Backend;

#[derive(Deserialize)]
struct R2Function {
    #[serde(alias = "addr")]
    offset: u64,
    #[serde(default)]
    size: Option<u64>,
    #[serde(default)]
    name: Option<String>,
}

impl Radare2Backend {
    pub fn parse_aflj(text: &str) -> Result<Vec<BackendRecord>, BackendError> {
        let json = text.trim();
        let json = json.get(json.find('[').unwrap_or(0)..).unwrap_or("");
        let funcs: Vec<R2Function> =
            serde_json::from_str(json).map_err(|e| BackendError::Output {
                tool: "r2",
                detail: e.to_string(),
            })?;
        Ok(funcs
            .into_iter()
            .map(|f| BackendRecord {
                start: f.offset,
                size: f.size.filter(|s| *s > 0),
                name: f.name,
            })
            .collect())
    }
}

impl DisassemblyBackend for Radare2Backend {
    fn name(&self) -> &'static str {
        "radare2"
    }

    fn query(&self, binary: &Path, kind: QueryKind) -> Result<Vec<BackendRecord>, BackendError> {
        match kind {
            QueryKind::FunctionStarts => {
                let out = run_tool("r2", &["-q", "-2", "-e", "bin.relocs.apply=true", "-c", "aa;aflj"], binary)?;
                Self::parse_aflj(&out)
            }
        }
    }
}

/// GNU objdump: function starts are taken from labels, direct call targets
/// and frame-setup prologues (`endbr64` / `push %rbp; mov %rsp,%rbp`).
#[derive(Clone, Debug, Default)]
pub struct ObjdumpBackend;

static LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([0-9a-f]+) <([^>]+)>:$").unwrap());
static INSN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*([0-9a-f]+):\s+(.*?)\s*$").unwrap());
static CALL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^call[ql]?\s+([0-9a-f]+)\b").unwrap());

impl ObjdumpBackend {
    pub fn parse_disassembly(text: &str) -> Vec<BackendRecord> {
        let mut starts: Vec<BackendRecord> = Vec::new();
        let mut push = |start: u64, name: Option<String>| starts.push(BackendRecord { start, size: None, name });
        let mut prev: Option<(u64, String)> = None;
        // whether the previous instruction can end a function
        let mut after_terminator = true;
        for line in text.lines() {
            if let Some(c) = LABEL.captures(line) {
                let addr = u64::from_str_radix(&c[1], 16).unwrap_or(0);
                let name = &c[2];
                // section labels such as `<.text>` carry no function identity
                if !name.starts_with('.') {
                    push(addr, Some(name.to_string()));
                }
                prev = None;
                after_terminator = true;
                continue;
            }
            let Some(c) = INSN.captures(line) else { continue };
            let Ok(addr) = u64::from_str_radix(&c[1], 16) else { continue };
            let insn = c[2].to_string();
            if insn.starts_with("endbr64") && after_terminator {
                push(addr, None);
            }
            if let Some((paddr, pinsn)) = &prev {
                if pinsn.starts_with("push") && pinsn.ends_with("%rbp") && insn.starts_with("mov") && insn.ends_with("%rsp,%rbp") {
                    push(*paddr, None);
                }
            }
            if let Some(t) = CALL.captures(&insn) {
                if let Ok(target) = u64::from_str_radix(&t[1], 16) {
                    push(target, None);
                }
            }
            after_terminator = insn.starts_with("ret")
                || insn.starts_with("jmp")
                || insn.starts_with("nop")
                || insn.starts_with("int3")
                || insn.starts_with("ud2")
                || insn.starts_with("cs nop")
                || insn.starts_with("xchg   %ax,%ax")
                || insn.starts_with("data16");
            prev = Some((addr, insn));
        }
        starts.sort_by_key(|r| (r.start, r.name.is_none()));
        starts.dedup_by_key(|r| r.start);
        starts
    }
}

impl DisassemblyBackend for ObjdumpBackend {
    fn name(&self) -> &'static str {
        "objdump"
    }

    fn query(&self, binary: &Path, kind: QueryKind) -> Result<Vec<BackendRecord>, BackendError> {
        match kind {
            QueryKind::FunctionStarts => {
                let out = run_tool("objdump", &["-d", "--no-show-raw-insn", "-M", "att"], binary)?;
                Ok(Self::parse_disassembly(&out))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_lines_round_trip() {
        let records = [
            BackendRecord { start: 0x1139, size: Some(0x20), name: Some("main".into()) },
            BackendRecord { start: 0x1000, size: None, name: None },
        ];
        for r in records {
            assert_eq!(BackendRecord::parse_line(&r.to_line()), Some(r));
        }
        assert_eq!(BackendRecord::parse_line("junk 12"), None);
    }

    #[test]
    fn objdump_starts() {
        let text = "\
Disassembly of section .text:

0000000000001040 <.text>:
    1040:\tendbr64
    1044:\txor    %ebp,%ebp
    1046:\tcall   1139 <foo>
    104b:\thlt
    104c:\tnopl   0x0(%rax)
    1050:\tpush   %rbp
    1051:\tmov    %rsp,%rbp
    1054:\tpop    %rbp
    1055:\tret
    1139:\tpush   %rbp
    113a:\tmov    %rsp,%rbp
    113d:\tret
";
        let starts: Vec<u64> = ObjdumpBackend::parse_disassembly(text).iter().map(|r| r.start).collect();
        assert_eq!(starts, vec![0x1040, 0x1050, 0x1139]);
    }

    #[test]
    fn objdump_labels_keep_names() {
        let text = "0000000000001170 <main>:\n    1170:\tpush   %rbp\n    1171:\tmov    %rsp,%rbp\n";
        let records = ObjdumpBackend::parse_disassembly(text);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].name.as_deref(), Some("main"));
    }

    #[test]
    fn radare2_json() {
        let text = r#"[{"offset":4464,"name":"main","size":102},{"offset":4176,"name":"entry0","size":38}]"#;
        let records = Radare2Backend::parse_aflj(text).unwrap();
        assert_eq!(records[0], BackendRecord { start: 4464, size: Some(102), name: Some("main".into()) });
        assert_eq!(records.len(), 2);
        assert!(Radare2Backend::parse_aflj("not json").is_err());
    }
}
