//! Enforcement distribution over defined functions and indirect call sites.
//!
//! A function is `Ignored` when an active ignorelist entry matches it,
//! otherwise `DefaultVisibility` when it was visibility-patched or already
//! had default visibility, otherwise `Protected`. Percentages are kept as
//! integer hundredths: each share is rounded half-to-even and the largest
//! share absorbs the residual so the three always sum to 100.00.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::census::{total_sites, IrFunction, IrVisibility};
use crate::ignorelist::{EntryKind, Rule};
use crate::symbolize::{canonical_function_name, demangle};
use crate::visibility::{source_name, VisibilityPatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnforcementStatus {
    Protected,
    DefaultVisibility,
    Ignored,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionInfo {
    pub name: String,
    pub file: Option<String>,
    pub call_site_count: u64,
    pub visibility: IrVisibility,
}

impl From<&IrFunction> for FunctionInfo {
    fn from(f: &IrFunction) -> Self {
        FunctionInfo {
            name: f.name.clone(),
            file: f.source_file.clone(),
            call_site_count: total_sites(&f.sites),
            visibility: f.visibility,
        }
    }
}

/// Three shares, each a whole number of hundredths of a percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub protected: f64,
    pub default_visibility: f64,
    pub ignored: f64,
}

// values are always exact hundredths, never NaN
impl Eq for Distribution {}

impl Distribution {
    fn from_hundredths(h: [u64; 3]) -> Self {
        Distribution {
            protected: h[0] as f64 / 100.0,
            default_visibility: h[1] as f64 / 100.0,
            ignored: h[2] as f64 / 100.0,
        }
    }

    pub fn hundredths(&self) -> [u64; 3] {
        [self.protected, self.default_visibility, self.ignored].map(|v| (v * 100.0).round() as u64)
    }

    pub fn as_tuple(&self) -> (f64, f64, f64) {
        (self.protected, self.default_visibility, self.ignored)
    }
}

/// Rounds `n * 10000 / d` half-to-even.
fn share_hundredths(n: u64, d: u64) -> u64 {
    let num = u128::from(n) * 10_000;
    let d = u128::from(d);
    let (q, r) = (num / d, num % d);
    let up = match (2 * r).cmp(&d) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => q % 2 == 1,
        std::cmp::Ordering::Less => false,
    };
    (q + u128::from(up)) as u64
}

/// Shares of `counts` in hundredths, reconciled to sum to exactly 10000.
/// An empty population counts as fully protected.
pub fn reconcile(counts: [u64; 3]) -> [u64; 3] {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return [10_000, 0, 0];
    }
    let mut h = counts.map(|c| share_hundredths(c, total));
    let sum: i64 = h.iter().map(|&v| v as i64).sum();
    let residual = 10_000 - sum;
    if residual != 0 {
        let largest = (0..3).fold(0, |best, i| if h[i] > h[best] { i } else { best });
        h[largest] = (h[largest] as i64 + residual) as u64;
    }
    h
}

/// Unreconciled percentages, for checking how far reconciliation moved.
pub fn raw_percentages(counts: [u64; 3]) -> [f64; 3] {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return [100.0, 0.0, 0.0];
    }
    counts.map(|c| c as f64 * 100.0 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageCore {
    pub per_function: Distribution,
    pub per_call_site: Distribution,
    pub function_counts: [u64; 3],
    pub call_site_counts: [u64; 3],
    pub statuses: Vec<(String, EnforcementStatus)>,
}

fn normalize_path(p: &str) -> &str {
    p.trim_start_matches("./")
}

fn rule_matches(rule: &Rule, f: &FunctionInfo) -> bool {
    match rule.kind {
        EntryKind::Fun => {
            let name = canonical_function_name(&f.name);
            let demangled = demangle(name);
            rule.pattern == name || rule.pattern == demangled || rule.pattern == source_name(name)
        }
        EntryKind::Src => f
            .file
            .as_deref()
            .is_some_and(|file| normalize_path(file) == normalize_path(&rule.pattern)),
    }
}

pub fn status_of(f: &FunctionInfo, rules: &[Rule], patched: &HashSet<&str>) -> EnforcementStatus {
    if rules.iter().any(|r| rule_matches(r, f)) {
        return EnforcementStatus::Ignored;
    }
    let name = canonical_function_name(&f.name);
    if patched.contains(name) || patched.contains(source_name(name).as_str()) || f.visibility == IrVisibility::Default {
        return EnforcementStatus::DefaultVisibility;
    }
    EnforcementStatus::Protected
}

pub fn compute_coverage(functions: &[FunctionInfo], rules: &[Rule], patches: &[VisibilityPatch]) -> CoverageCore {
    let patched: HashSet<&str> = patches
        .iter()
        .flat_map(|p| std::iter::once(p.symbol.as_str()).chain(p.mangled.as_deref()))
        .collect();
    let mut function_counts = [0u64; 3];
    let mut call_site_counts = [0u64; 3];
    let mut statuses = Vec::with_capacity(functions.len());
    for f in functions {
        let status = status_of(f, rules, &patched);
        let slot = match status {
            EnforcementStatus::Protected => 0,
            EnforcementStatus::DefaultVisibility => 1,
            EnforcementStatus::Ignored => 2,
        };
        function_counts[slot] += 1;
        call_site_counts[slot] += f.call_site_count;
        statuses.push((f.name.clone(), status));
    }
    CoverageCore {
        per_function: Distribution::from_hundredths(reconcile(function_counts)),
        per_call_site: Distribution::from_hundredths(reconcile(call_site_counts)),
        function_counts,
        call_site_counts,
        statuses,
    }
}
