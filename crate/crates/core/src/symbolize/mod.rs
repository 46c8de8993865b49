//! Address to function / source-location resolution.
//!
//! Answers come from, in order of preference: DWARF line tables, the ELF
//! symbol tables, and function boundaries inferred by a disassembly backend
//! for stripped code. Inlined frames are not expanded: the function owning a
//! span owns every address in it.

pub mod backend;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use object::{Object, ObjectSection, ObjectSegment, ObjectSymbol, SectionKind, SymbolKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::MemoryMapping;
use backend::{DisassemblyBackend, ObjdumpBackend, QueryKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Confidence {
    Debuginfo,
    SymbolTable,
    BoundaryHeuristic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolInfo {
    pub function: Option<String>,
    pub source_file: Option<PathBuf>,
    pub line: Option<u32>,
    pub confidence: Confidence,
}

impl SymbolInfo {
    /// A real function name, not a synthetic range label.
    pub fn function_name(&self) -> Option<&str> {
        match self.confidence {
            Confidence::BoundaryHeuristic => None,
            _ => self.function.as_deref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSpan {
    pub name: String,
    pub start: u64,
    /// Exclusive.
    pub end: u64,
    pub heuristic: bool,
}

impl FunctionSpan {
    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolizeWarning {
    pub binary: PathBuf,
    pub message: String,
}

impl fmt::Display for SymbolizeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.binary.display(), self.message)
    }
}

#[derive(Debug, Error)]
pub enum SymbolizeError {
    #[error("address {address:#x} is outside every function of {binary}")]
    Unresolved { binary: PathBuf, address: u64 },
    #[error("address {address:#x} is not mapped from {binary}")]
    Unmapped { binary: PathBuf, address: u64 },
}

/// Demangles Itanium C++ names; anything else is returned unchanged.
pub fn demangle(symbol: &str) -> String {
    if symbol.starts_with("_Z") {
        if let Ok(sym) = cpp_demangle::Symbol::new(symbol) {
            if let Ok(text) = sym.demangle() {
                return text;
            }
        }
    }
    symbol.to_string()
}

/// Strips the suffix LLVM's CFI lowering gives to the real body of an
/// address-taken function (the plain name then labels its jump-table slot).
pub fn canonical_function_name(symbol: &str) -> &str {
    symbol.strip_suffix(".cfi").unwrap_or(symbol)
}

struct LoadSegment {
    file_offset: u64,
    file_size: u64,
    address: u64,
}

struct BinaryIndex {
    spans: Vec<FunctionSpan>,
    /// Symbol-table spans before gap filling.
    symbols: Vec<FunctionSpan>,
    exec_ranges: Vec<(u64, u64)>,
    entry: u64,
    /// Whether gaps have been filled from the disassembly backend.
    gaps_filled: bool,
    segments: Vec<LoadSegment>,
    dwarf: Option<addr2line::Loader>,
}

impl BinaryIndex {
    fn span_at(&self, address: u64) -> Option<&FunctionSpan> {
        let pos = self.spans.partition_point(|s| s.start <= address);
        pos.checked_sub(1)
            .map(|i| &self.spans[i])
            .filter(|s| s.contains(address))
    }

    fn in_gap(&self, address: u64) -> bool {
        !self.gaps_filled
            && self.exec_ranges.iter().any(|&(lo, hi)| lo <= address && address < hi)
            && self.span_at(address).is_none()
    }
}

fn label(start: u64) -> String {
    format!("sub_{start:x}")
}

/// Builds sorted, non-overlapping spans from symbol-table entries, then fills
/// gaps inside executable ranges with spans started at `heuristic_starts`.
fn merge_spans(
    mut symbols: Vec<FunctionSpan>,
    exec_ranges: &[(u64, u64)],
    heuristic_starts: &[u64],
) -> Vec<FunctionSpan> {
    // on equal starts prefer the longest span, then the lexicographically smallest name
    symbols.sort_by(|a, b| {
        a.start
            .cmp(&b.start)
            .then(b.end.cmp(&a.end))
            .then(a.name.cmp(&b.name))
    });
    let mut spans: Vec<FunctionSpan> = Vec::with_capacity(symbols.len());
    for s in symbols {
        if s.start >= s.end {
            continue;
        }
        if spans.last().is_some_and(|prev| s.start < prev.end) {
            continue;
        }
        spans.push(s);
    }

    let mut starts: Vec<u64> = heuristic_starts.to_vec();
    starts.sort_unstable();
    starts.dedup();
    let mut filled = Vec::new();
    for &(lo, hi) in exec_ranges {
        // free intervals of [lo, hi) not covered by symbol spans
        let mut cursor = lo;
        let mut gaps = Vec::new();
        for s in spans.iter().filter(|s| s.end > lo && s.start < hi) {
            if s.start > cursor {
                gaps.push((cursor, s.start));
            }
            cursor = cursor.max(s.end);
        }
        if cursor < hi {
            gaps.push((cursor, hi));
        }
        for (g_lo, g_hi) in gaps {
            let inside: Vec<u64> = starts
                .iter()
                .copied()
                .filter(|a| *a >= g_lo && *a < g_hi)
                .collect();
            for (i, &start) in inside.iter().enumerate() {
                let end = inside.get(i + 1).copied().unwrap_or(g_hi);
                filled.push(FunctionSpan {
                    name: label(start),
                    start,
                    end,
                    heuristic: true,
                });
            }
        }
    }
    spans.extend(filled);
    spans.sort_by_key(|s| s.start);
    spans
}

pub struct Symbolizer {
    backend: Box<dyn DisassemblyBackend>,
    cache: HashMap<PathBuf, BinaryIndex>,
    warnings: Vec<SymbolizeWarning>,
    project_root: Option<PathBuf>,
}

impl Default for Symbolizer {
    fn default() -> Self {
        Symbolizer::new(Box::new(ObjdumpBackend))
    }
}

impl Symbolizer {
    pub fn new(backend: Box<dyn DisassemblyBackend>) -> Self {
        Symbolizer {
            backend,
            cache: HashMap::new(),
            warnings: Vec::new(),
            project_root: None,
        }
    }

    /// Source files under `root` are reported relative to it.
    pub fn with_project_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.project_root = Some(root.into());
        self
    }

    pub fn warnings(&self) -> &[SymbolizeWarning] {
        &self.warnings
    }

    fn warn(&mut self, binary: &Path, message: String) {
        warn!("{}: {message}", binary.display());
        self.warnings.push(SymbolizeWarning {
            binary: binary.to_path_buf(),
            message,
        });
    }

    fn index(&mut self, binary: &Path) -> &BinaryIndex {
        if !self.cache.contains_key(binary) {
            let index = self.build_index(binary);
            self.cache.insert(binary.to_path_buf(), index);
        }
        &self.cache[binary]
    }

    /// Disassembles `binary` once to label code the symbol tables miss.
    fn fill_gaps(&mut self, binary: &Path) {
        if self.index(binary).gaps_filled {
            return;
        }
        let mut starts = vec![self.cache[binary].entry];
        match self.backend.query(binary, QueryKind::FunctionStarts) {
            Ok(records) => starts.extend(records.iter().map(|r| r.start)),
            Err(e) => {
                let name = self.backend.name();
                self.warn(binary, format!("{name} backend: {e}"));
            }
        }
        let index = self.cache.get_mut(binary).expect("indexed above");
        index.spans = merge_spans(index.symbols.clone(), &index.exec_ranges, &starts);
        index.gaps_filled = true;
    }

    fn build_index(&mut self, binary: &Path) -> BinaryIndex {
        let empty = BinaryIndex {
            spans: Vec::new(),
            symbols: Vec::new(),
            exec_ranges: Vec::new(),
            entry: 0,
            gaps_filled: true,
            segments: Vec::new(),
            dwarf: None,
        };
        let data = match std::fs::read(binary) {
            Ok(d) => d,
            Err(e) => {
                self.warn(binary, format!("unreadable: {e}"));
                return empty;
            }
        };
        let file = match object::File::parse(&*data) {
            Ok(f) => f,
            Err(e) => {
                self.warn(binary, format!("not an object file: {e}"));
                return empty;
            }
        };

        let mut exec_ranges = Vec::new();
        for section in file.sections() {
            if section.kind() == SectionKind::Text && section.size() > 0 {
                exec_ranges.push((section.address(), section.address() + section.size()));
            }
        }
        let mut symbols = Vec::new();
        for sym in file.symbols().chain(file.dynamic_symbols()) {
            if sym.kind() != SymbolKind::Text || !sym.is_definition() || sym.size() == 0 {
                continue;
            }
            let Ok(name) = sym.name() else { continue };
            symbols.push(FunctionSpan {
                name: canonical_function_name(name).to_string(),
                start: sym.address(),
                end: sym.address() + sym.size(),
                heuristic: false,
            });
        }

        let spans = merge_spans(symbols.clone(), &exec_ranges, &[]);

        let segments = file
            .segments()
            .map(|seg| {
                let (file_offset, file_size) = seg.file_range();
                LoadSegment {
                    file_offset,
                    file_size,
                    address: seg.address(),
                }
            })
            .collect();
        let dwarf = if file.section_by_name(".debug_info").is_some() {
            addr2line::Loader::new(binary).ok()
        } else {
            None
        };
        BinaryIndex {
            spans,
            symbols,
            exec_ranges,
            entry: file.entry(),
            gaps_filled: false,
            segments,
            dwarf,
        }
    }

    /// Sorted, non-overlapping function spans of `binary`. Unparseable input
    /// yields no spans and a recorded warning.
    pub fn function_boundaries(&mut self, binary: &Path) -> Vec<FunctionSpan> {
        self.fill_gaps(binary);
        self.index(binary).spans.clone()
    }

    /// Resolves a static (bias-free) address inside `binary`.
    pub fn resolve(&mut self, binary: &Path, address: u64) -> Result<SymbolInfo, SymbolizeError> {
        let root = self.project_root.clone();
        let unresolved = || SymbolizeError::Unresolved {
            binary: binary.to_path_buf(),
            address,
        };
        if address == 0 {
            return Err(unresolved());
        }
        if self.index(binary).in_gap(address) {
            self.fill_gaps(binary);
        }
        let index = self.index(binary);
        let span = index.span_at(address).ok_or_else(unresolved)?;

        if span.heuristic {
            return Ok(SymbolInfo {
                function: Some(span.name.clone()),
                source_file: None,
                line: None,
                confidence: Confidence::BoundaryHeuristic,
            });
        }
        let function = Some(demangle(&span.name));
        if let Some(loader) = &index.dwarf {
            // the outermost frame's location lies in the owning function's body
            let mut outermost = None;
            if let Ok(mut frames) = loader.find_frames(address) {
                while let Ok(Some(frame)) = frames.next() {
                    if let Some(loc) = frame.location {
                        outermost = Some((loc.file.map(PathBuf::from), loc.line));
                    }
                }
            }
            if let Some((Some(file), line)) = outermost {
                let file = match &root {
                    Some(r) => file.strip_prefix(r).map(Path::to_path_buf).unwrap_or(file),
                    None => file,
                };
                return Ok(SymbolInfo {
                    function,
                    source_file: Some(file),
                    line,
                    confidence: Confidence::Debuginfo,
                });
            }
        }
        Ok(SymbolInfo {
            function,
            source_file: None,
            line: None,
            confidence: Confidence::SymbolTable,
        })
    }

    /// Translates a runtime address to `(image, static address)` using the
    /// memory map captured with the trap.
    pub fn static_address(
        &mut self,
        mappings: &[MemoryMapping],
        runtime: u64,
    ) -> Option<(PathBuf, u64)> {
        let mapping = mappings.iter().find(|m| m.contains(runtime))?;
        let path = mapping.path.clone()?;
        let file_offset = runtime - mapping.start + mapping.offset;
        let index = self.index(&path);
        let seg = index
            .segments
            .iter()
            .find(|s| s.file_offset <= file_offset && file_offset < s.file_offset + s.file_size)?;
        Some((path, file_offset - seg.file_offset + seg.address))
    }

    /// `static_address` followed by `resolve`.
    pub fn resolve_runtime(
        &mut self,
        mappings: &[MemoryMapping],
        runtime: u64,
    ) -> Result<(PathBuf, u64, SymbolInfo), SymbolizeError> {
        let (path, addr) =
            self.static_address(mappings, runtime)
                .ok_or_else(|| SymbolizeError::Unmapped {
                    binary: PathBuf::new(),
                    address: runtime,
                })?;
        let info = self.resolve(&path, addr)?;
        Ok((path, addr, info))
    }
}
