//! Escalation ladder for CFI violations.
//!
//! Each violation starts at the narrowest exception and widens one rung per
//! failed re-run:
//!
//! | level | entry                         |
//! |-------|-------------------------------|
//! | L0    | `fun:` callee                 |
//! | L1    | `fun:` caller                 |
//! | L2    | `fun:` caller's caller        |
//! | L3    | `src:` callee's source file   |
//! | L4    | `src:` caller's source file   |
//! | L5    | unresolvable                  |
//!
//! "Callee" is the function containing the trapping check; callers come from
//! the two frame-pointer return addresses. A rung whose identity is unknown
//! is skipped.

use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::ignorelist::{EntryKind, Ignorelist, IgnorelistEntry, Rule};
use crate::symbolize::SymbolInfo;
use crate::trace::TrapEvent;

/// Upper bound on rebuild/re-run cycles spent on one violation.
pub const MAX_ATTEMPTS: u32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViolationId(pub u32);

impl fmt::Display for ViolationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LadderLevel {
    L0,
    L1,
    L2,
    L3,
    L4,
    L5,
}

impl LadderLevel {
    pub const ALL: [LadderLevel; 6] = [
        LadderLevel::L0,
        LadderLevel::L1,
        LadderLevel::L2,
        LadderLevel::L3,
        LadderLevel::L4,
        LadderLevel::L5,
    ];

    pub fn entry_kind(self) -> Option<EntryKind> {
        match self {
            LadderLevel::L0 | LadderLevel::L1 | LadderLevel::L2 => Some(EntryKind::Fun),
            LadderLevel::L3 | LadderLevel::L4 => Some(EntryKind::Src),
            LadderLevel::L5 => None,
        }
    }

    pub fn next(self) -> LadderLevel {
        match self {
            LadderLevel::L0 => LadderLevel::L1,
            LadderLevel::L1 => LadderLevel::L2,
            LadderLevel::L2 => LadderLevel::L3,
            LadderLevel::L3 => LadderLevel::L4,
            LadderLevel::L4 | LadderLevel::L5 => LadderLevel::L5,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            LadderLevel::L0 => "callee function",
            LadderLevel::L1 => "caller function",
            LadderLevel::L2 => "caller's caller function",
            LadderLevel::L3 => "callee source file",
            LadderLevel::L4 => "caller source file",
            LadderLevel::L5 => "unresolvable",
        }
    }
}

impl fmt::Display for LadderLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationStatus {
    Open,
    Fixed(LadderLevel),
    Unresolvable,
}

/// Identical traps from different tests map to the same violation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViolationKey {
    pub binary: PathBuf,
    pub static_pc: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub id: ViolationId,
    pub key: ViolationKey,
    pub test_ids: Vec<String>,
    pub trap: TrapEvent,
    pub callee: SymbolInfo,
    pub caller: Option<SymbolInfo>,
    pub callers_caller: Option<SymbolInfo>,
    pub ladder_level: LadderLevel,
    pub status: ViolationStatus,
    pub attempts: u32,
    /// Rungs passed over for lack of an identity.
    pub skipped: Vec<LadderLevel>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scope {
    Entry(IgnorelistEntry),
    Unresolvable,
}

impl Violation {
    pub fn new(
        id: ViolationId,
        key: ViolationKey,
        test_id: Option<String>,
        trap: TrapEvent,
        callee: SymbolInfo,
        caller: Option<SymbolInfo>,
        callers_caller: Option<SymbolInfo>,
    ) -> Self {
        Violation {
            id,
            key,
            test_ids: test_id.into_iter().collect(),
            trap,
            callee,
            caller,
            callers_caller,
            ladder_level: LadderLevel::L0,
            status: ViolationStatus::Open,
            attempts: 0,
            skipped: Vec::new(),
        }
    }

    pub fn add_test(&mut self, test_id: &str) {
        if !self.test_ids.iter().any(|t| t == test_id) {
            self.test_ids.push(test_id.to_string());
        }
    }

    pub fn is_open(&self) -> bool {
        self.status == ViolationStatus::Open
    }

    /// The `fun:`/`src:` rule for `level`, if its identity is known.
    pub fn rule_for(&self, level: LadderLevel) -> Option<Rule> {
        let function = |info: Option<&SymbolInfo>| {
            info.and_then(SymbolInfo::function_name)
                .filter(|n| !n.is_empty())
                .map(Rule::fun)
        };
        // source entries must be project-relative to match what the compiler sees
        let source = |info: Option<&SymbolInfo>| {
            info.and_then(|i| i.source_file.as_deref())
                .filter(|p| p.is_relative() && !p.as_os_str().is_empty())
                .map(|p: &Path| Rule::src(p.to_string_lossy()))
        };
        match level {
            LadderLevel::L0 => function(Some(&self.callee)),
            LadderLevel::L1 => function(self.caller.as_ref()),
            LadderLevel::L2 => function(self.callers_caller.as_ref()),
            LadderLevel::L3 => source(Some(&self.callee)),
            LadderLevel::L4 => source(self.caller.as_ref()),
            LadderLevel::L5 => None,
        }
    }
}

/// Returns the entry to try for `v`, first advancing past rungs whose
/// identity is unavailable. Reaching L5 marks `v` unresolvable.
pub fn next_scope(v: &mut Violation) -> Scope {
    if v.status != ViolationStatus::Open {
        return Scope::Unresolvable;
    }
    loop {
        if v.ladder_level == LadderLevel::L5 {
            v.status = ViolationStatus::Unresolvable;
            return Scope::Unresolvable;
        }
        if let Some(rule) = v.rule_for(v.ladder_level) {
            let entry = IgnorelistEntry::new(rule, v.id, v.ladder_level)
                .expect("rule kind follows level");
            return Scope::Entry(entry);
        }
        info!(
            "{}: skipping {} ({}): identity unavailable",
            v.id,
            v.ladder_level,
            v.ladder_level.describe()
        );
        v.skipped.push(v.ladder_level);
        v.ladder_level = v.ladder_level.next();
    }
}

/// Applies the result of re-running `v`'s tests with its current entry active.
pub fn record_outcome(v: &mut Violation, list: &mut Ignorelist, trap_recurred: bool) {
    if v.status != ViolationStatus::Open {
        return;
    }
    v.attempts += 1;
    let current = v.rule_for(v.ladder_level);
    if !trap_recurred {
        v.status = ViolationStatus::Fixed(v.ladder_level);
        let stale: Vec<Rule> = list
            .entries_for(v.id)
            .into_iter()
            .filter(|e| Some(&e.rule) != current.as_ref())
            .map(|e| e.rule.clone())
            .collect();
        for rule in stale {
            list.retire(&rule, v.id);
        }
        return;
    }
    if let Some(rule) = &current {
        list.retire(rule, v.id);
    }
    v.ladder_level = v.ladder_level.next();
    if v.ladder_level == LadderLevel::L5 || v.attempts >= MAX_ATTEMPTS {
        v.ladder_level = LadderLevel::L5;
        v.status = ViolationStatus::Unresolvable;
        for rule in list.entries_for(v.id).into_iter().map(|e| e.rule.clone()).collect::<Vec<_>>() {
            list.retire(&rule, v.id);
        }
    }
}
