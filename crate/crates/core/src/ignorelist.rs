//! Sanitizer special-case list handed to `-fsanitize-ignorelist=`.
//!
//! Only global `fun:` and `src:` lines are produced; no sections, globs or
//! `type:` entries.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::escalation::{LadderLevel, ViolationId};

pub const IGNORELIST_FILE: &str = "cfi.ignorelist";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Fun,
    Src,
}

impl EntryKind {
    pub fn prefix(self) -> &'static str {
        match self {
            EntryKind::Fun => "fun",
            EntryKind::Src => "src",
        }
    }
}

/// A single `kind:pattern` line. Ordered by kind, then pattern.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rule {
    pub kind: EntryKind,
    pub pattern: String,
}

impl Rule {
    pub fn fun(pattern: impl Into<String>) -> Self {
        Rule {
            kind: EntryKind::Fun,
            pattern: pattern.into(),
        }
    }

    pub fn src(pattern: impl Into<String>) -> Self {
        Rule {
            kind: EntryKind::Src,
            pattern: pattern.into(),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.prefix(), self.pattern)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IgnorelistEntry {
    pub rule: Rule,
    pub origins: Vec<ViolationId>,
    pub level: LadderLevel,
    pub active: bool,
}

#[derive(Debug, Error)]
pub enum IgnorelistError {
    #[error("line {line}: unsupported ignorelist entry `{text}`")]
    Unsupported { line: usize, text: String },
    #[error("level {level} cannot carry a `{kind}:` entry")]
    LevelMismatch { level: LadderLevel, kind: &'static str },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl IgnorelistEntry {
    pub fn new(rule: Rule, origin: ViolationId, level: LadderLevel) -> Result<Self, IgnorelistError> {
        let expected = level.entry_kind();
        if expected != Some(rule.kind) {
            return Err(IgnorelistError::LevelMismatch {
                level,
                kind: rule.kind.prefix(),
            });
        }
        Ok(IgnorelistEntry {
            rule,
            origins: vec![origin],
            level,
            active: true,
        })
    }
}

/// Renders rules in normal form: sorted, deduplicated, one per line.
pub fn render<'a>(rules: impl IntoIterator<Item = &'a Rule>) -> String {
    let mut sorted: Vec<&Rule> = rules.into_iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut out = String::new();
    for rule in sorted {
        out.push_str(&rule.to_string());
        out.push('\n');
    }
    out
}

/// Parses `fun:`/`src:` lines; blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<Rule>, IgnorelistError> {
    let mut rules = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rule = match line.split_once(':') {
            Some(("fun", pat)) if !pat.is_empty() => Rule::fun(pat),
            Some(("src", pat)) if !pat.is_empty() => Rule::src(pat),
            _ => {
                return Err(IgnorelistError::Unsupported {
                    line: idx + 1,
                    text: line.to_string(),
                })
            }
        };
        rules.push(rule);
    }
    Ok(rules)
}

/// The set of entries with provenance; the rendered file holds the active ones.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ignorelist {
    entries: Vec<IgnorelistEntry>,
}

impl Ignorelist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[IgnorelistEntry] {
        &self.entries
    }

    pub fn active(&self) -> impl Iterator<Item = &IgnorelistEntry> {
        self.entries.iter().filter(|e| e.active)
    }

    pub fn active_rules(&self) -> Vec<Rule> {
        let mut rules: Vec<Rule> = self.active().map(|e| e.rule.clone()).collect();
        rules.sort();
        rules
    }

    pub fn is_active(&self, rule: &Rule) -> bool {
        self.active().any(|e| &e.rule == rule)
    }

    /// Set union by rule; origins are concatenated on collision.
    pub fn merge(&mut self, entry: IgnorelistEntry) {
        match self.entries.iter_mut().find(|e| e.rule == entry.rule) {
            Some(existing) => {
                if !existing.active {
                    existing.active = true;
                    existing.origins.clear();
                    existing.level = entry.level;
                }
                for origin in entry.origins {
                    if !existing.origins.contains(&origin) {
                        existing.origins.push(origin);
                    }
                }
            }
            None => self.entries.push(entry),
        }
    }

    /// Drops `origin` from the entry for `rule`; the entry goes inactive once
    /// no origin is left.
    pub fn retire(&mut self, rule: &Rule, origin: ViolationId) {
        if let Some(entry) = self.entries.iter_mut().find(|e| &e.rule == rule && e.active) {
            entry.origins.retain(|o| *o != origin);
            if entry.origins.is_empty() {
                entry.active = false;
            }
        }
    }

    /// Entries that are active and name `origin`.
    pub fn entries_for(&self, origin: ViolationId) -> Vec<&IgnorelistEntry> {
        self.active().filter(|e| e.origins.contains(&origin)).collect()
    }

    pub fn render(&self) -> String {
        render(self.active().map(|e| &e.rule))
    }

    pub fn write(&self, path: &Path) -> Result<(), IgnorelistError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.render())?;
        Ok(())
    }
}
