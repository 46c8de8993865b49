//! Indirect control-flow census over textual LLVM IR.
//!
//! Every site lands in at most one category. Calls are tested in this order:
//!
//! 1. inline assembly (`call ... asm`, `callbr`)
//! 2. direct calls (callee is `@name` or a cast of one); not counted
//! 3. virtual: callee loaded from a slot of a table that was itself loaded
//!    through the object pointer (double load, no non-zero field offset)
//! 4. lowered jump table: callee loaded from an indexed element of a
//!    `constant` global array of code addresses
//! 5. everything else is a function-pointer call
//!
//! Outside calls, `store` of a function address is a callback store,
//! `switch` is a high-level jump table, `indirectbr` is a lowered one, and
//! each run of consecutive `module asm` lines counts once as inline asm.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrSiteCensus {
    pub fp_calls: u64,
    pub virtual_calls: u64,
    pub callback_stores: u64,
    pub jt_switch: u64,
    pub jt_lowered: u64,
    pub inline_asm: u64,
}

impl IrSiteCensus {
    pub fn new(
        fp_calls: u64,
        virtual_calls: u64,
        callback_stores: u64,
        jt_switch: u64,
        jt_lowered: u64,
        inline_asm: u64,
    ) -> Self {
        IrSiteCensus {
            fp_calls,
            virtual_calls,
            callback_stores,
            jt_switch,
            jt_lowered,
            inline_asm,
        }
    }

    fn bump(&mut self, category: SiteCategory) {
        match category {
            SiteCategory::FpCall => self.fp_calls += 1,
            SiteCategory::VirtualCall => self.virtual_calls += 1,
            SiteCategory::CallbackStore => self.callback_stores += 1,
            SiteCategory::JtSwitch => self.jt_switch += 1,
            SiteCategory::JtLowered => self.jt_lowered += 1,
            SiteCategory::InlineAsm => self.inline_asm += 1,
        }
    }
}

pub fn total_sites(c: &IrSiteCensus) -> u64 {
    c.fp_calls + c.virtual_calls + c.callback_stores + c.jt_switch + c.jt_lowered + c.inline_asm
}

impl Add for IrSiteCensus {
    type Output = IrSiteCensus;

    fn add(mut self, rhs: IrSiteCensus) -> IrSiteCensus {
        self += rhs;
        self
    }
}

impl AddAssign for IrSiteCensus {
    fn add_assign(&mut self, rhs: IrSiteCensus) {
        self.fp_calls += rhs.fp_calls;
        self.virtual_calls += rhs.virtual_calls;
        self.callback_stores += rhs.callback_stores;
        self.jt_switch += rhs.jt_switch;
        self.jt_lowered += rhs.jt_lowered;
        self.inline_asm += rhs.inline_asm;
    }
}

impl fmt::Display for IrSiteCensus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("function-pointer calls", self.fp_calls),
            ("virtual calls", self.virtual_calls),
            ("callback stores", self.callback_stores),
            ("jump tables (switch)", self.jt_switch),
            ("jump tables (lowered)", self.jt_lowered),
            ("inline asm", self.inline_asm),
            ("total", total_sites(self)),
        ];
        for (label, n) in rows {
            writeln!(f, "{label:<24}{n:>10}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SiteCategory {
    FpCall,
    VirtualCall,
    CallbackStore,
    JtSwitch,
    JtLowered,
    InlineAsm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IrVisibility {
    Default,
    Hidden,
    /// internal or private linkage
    Local,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrFunction {
    pub name: String,
    pub source_file: Option<String>,
    pub visibility: IrVisibility,
    pub sites: IrSiteCensus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrDiagnostic {
    pub source: Option<PathBuf>,
    pub line: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCensus {
    pub census: IrSiteCensus,
    pub functions: Vec<IrFunction>,
    pub diagnostics: Vec<IrDiagnostic>,
}

impl ModuleCensus {
    pub fn absorb(&mut self, other: ModuleCensus) {
        self.census += other.census;
        self.functions.extend(other.functions);
        self.diagnostics.extend(other.diagnostics);
    }
}

static GLOBAL_NAME: &str = r#"(@(?:"[^"]*"|[-\w.$]+))"#;
static DEFINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"^define\s+(.*?){GLOBAL_NAME}\(")).unwrap());
static DECLARE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"^declare\s+.*?{GLOBAL_NAME}\(")).unwrap());
static GLOBAL_VAR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"^{GLOBAL_NAME}\s*=\s*(.*?)\b(global|constant)\s+(.*)$")).unwrap()
});
static SOURCE_FILENAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^source_filename\s*=\s*"(.*)"\s*$"#).unwrap());
static ASSIGN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^(%(?:"[^"]*"|[-\w.$]+))\s*=\s*(.*)$"#).unwrap());
static CALL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:(?:tail|musttail|notail)\s+)?(call|invoke|callbr)\b(.*)$").unwrap()
});
static CALLEE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?:^|[\s,(])((?:@|%)(?:"[^"]*"|[-\w.$]+))\("#).unwrap()
});
static CAST_CALLEE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"\b(?:bitcast|addrspacecast)\s*\(.*?(@(?:"[^"]*"|[-\w.$]+))\s+to\b"#).unwrap()
});
static LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"^(?:[-\w.$]+|"[^"]*"):"#).unwrap());
static CONST_INDEX: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^i\d+\s+-?\d+$").unwrap());
static FUNCTION_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"@(?:"[^"]*"|[-\w.$]+)"#).unwrap());

/// Splits at commas outside brackets, braces, parentheses and quotes.
fn split_top(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut quoted = false;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '(' | '[' | '{' | '<' if !quoted => depth += 1,
            ')' | ']' | '}' | '>' if !quoted => depth -= 1,
            ',' if !quoted && depth == 0 => {
                parts.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(s[start..].trim());
    parts
}

/// Last whitespace-separated token, i.e. the value of a `<ty> <value>` operand.
fn operand_value(typed: &str) -> &str {
    typed.rsplit(char::is_whitespace).next().unwrap_or(typed)
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            ';' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

#[derive(Default)]
struct ModuleFacts {
    functions: HashSet<String>,
    /// `constant` globals whose initializer holds code addresses.
    code_tables: HashSet<String>,
}

fn gather_facts(lines: &[&str]) -> ModuleFacts {
    let mut facts = ModuleFacts::default();
    for raw in lines {
        let line = raw.trim_start();
        if let Some(c) = DEFINE.captures(line) {
            facts.functions.insert(c[2].to_string());
        } else if let Some(c) = DECLARE.captures(line) {
            facts.functions.insert(c[1].to_string());
        }
    }
    for raw in lines {
        if let Some(c) = GLOBAL_VAR.captures(raw) {
            if &c[3] != "constant" {
                continue;
            }
            let init = &c[4];
            let holds_code = init.contains("blockaddress(")
                || FUNCTION_REF
                    .find_iter(init)
                    .any(|m| facts.functions.contains(m.as_str()));
            if holds_code {
                facts.code_tables.insert(c[1].to_string());
            }
        }
    }
    facts
}

/// Instruction text of each `%value` defined in one function body.
struct Defs<'a> {
    map: HashMap<&'a str, &'a str>,
}

enum Def<'a> {
    Load(&'a str),
    Gep { base: &'a str, indices: Vec<&'a str> },
    Cast(&'a str),
    Alloca,
    Other,
}

impl<'a> Defs<'a> {
    fn get(&self, value: &str) -> Def<'a> {
        let Some(rhs) = self.map.get(value).copied() else {
            return Def::Other;
        };
        if let Some(rest) = rhs.strip_prefix("load ") {
            let rest = rest.trim_start_matches("atomic ").trim_start_matches("volatile ");
            let parts = split_top(rest);
            return match parts.get(1) {
                Some(p) => Def::Load(operand_value(p)),
                None => Def::Other,
            };
        }
        if let Some(rest) = rhs.strip_prefix("getelementptr ") {
            let rest = rest.trim_start_matches("inbounds ");
            let parts = split_top(rest);
            if parts.len() >= 2 {
                return Def::Gep {
                    base: operand_value(parts[1]),
                    indices: parts[2..].to_vec(),
                };
            }
            return Def::Other;
        }
        for cast in ["bitcast ", "addrspacecast "] {
            if let Some(rest) = rhs.strip_prefix(cast) {
                let operand = rest.split(" to ").next().unwrap_or(rest);
                return Def::Cast(operand_value(operand.trim()));
            }
        }
        if rhs.starts_with("alloca ") {
            return Def::Alloca;
        }
        Def::Other
    }

    fn strip_casts(&self, mut value: &'a str) -> &'a str {
        for _ in 0..16 {
            match self.get(value) {
                Def::Cast(v) => value = v,
                _ => break,
            }
        }
        value
    }

    /// Strips casts and all-zero GEPs; `None` if a non-zero offset is applied.
    fn strip_to_first_field(&self, mut value: &'a str) -> Option<&'a str> {
        for _ in 0..16 {
            match self.get(value) {
                Def::Cast(v) => value = v,
                Def::Gep { base, indices } => {
                    let zero = indices.iter().all(|i| {
                        let v = operand_value(i);
                        v == "0" || v == "zeroinitializer"
                    });
                    if !zero {
                        return None;
                    }
                    value = base;
                }
                _ => break,
            }
        }
        Some(value)
    }

    fn is_virtual(&self, callee: &str) -> bool {
        let Def::Load(slot) = self.get(self.strip_casts(callee)) else {
            return false;
        };
        let slot = self.strip_casts(slot);
        let table = match self.get(slot) {
            Def::Gep { base, .. } => self.strip_casts(base),
            _ => slot,
        };
        let Def::Load(object) = self.get(table) else {
            return false;
        };
        match self.strip_to_first_field(object) {
            Some(obj) => !matches!(self.get(obj), Def::Alloca) && !obj.starts_with('@'),
            None => false,
        }
    }

    fn is_lowered(&self, callee: &str, facts: &ModuleFacts) -> bool {
        let Def::Load(slot) = self.get(self.strip_casts(callee)) else {
            return false;
        };
        let Def::Gep { base, indices } = self.get(self.strip_casts(slot)) else {
            return false;
        };
        let computed = indices.iter().any(|i| !CONST_INDEX.is_match(i));
        computed && facts.code_tables.contains(self.strip_casts(base))
    }
}

enum CallKind {
    Direct,
    Site(SiteCategory),
}

fn classify_call(rest: &str, keyword: &str, defs: &Defs, facts: &ModuleFacts) -> Option<CallKind> {
    if keyword == "callbr" || rest.contains(" asm ") {
        return Some(CallKind::Site(SiteCategory::InlineAsm));
    }
    let callee = match CALLEE.captures(rest) {
        Some(c) => c.get(1).unwrap().as_str(),
        None if CAST_CALLEE.is_match(rest) => return Some(CallKind::Direct),
        None => return None,
    };
    if callee.starts_with('@') {
        return Some(CallKind::Direct);
    }
    let category = if defs.is_virtual(callee) {
        SiteCategory::VirtualCall
    } else if defs.is_lowered(callee, facts) {
        SiteCategory::JtLowered
    } else {
        SiteCategory::FpCall
    };
    Some(CallKind::Site(category))
}

fn stores_function(rest: &str, facts: &ModuleFacts) -> bool {
    let rest = rest.trim_start_matches("atomic ").trim_start_matches("volatile ");
    let parts = split_top(rest);
    let Some(value) = parts.first() else { return false };
    FUNCTION_REF.find_iter(value).any(|m| facts.functions.contains(m.as_str()))
}

/// Census of one IR module, keeping per-function site counts.
pub fn analyze_module(ir_text: &str) -> ModuleCensus {
    let lines: Vec<&str> = ir_text.lines().collect();
    let facts = gather_facts(&lines);
    let mut out = ModuleCensus::default();
    let mut source_file: Option<String> = None;
    let mut in_module_asm = false;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if let Some(c) = SOURCE_FILENAME.captures(line) {
            source_file = Some(c[1].to_string());
        }
        if line.starts_with("module asm ") {
            if !in_module_asm {
                out.census.inline_asm += 1;
            }
            in_module_asm = true;
            i += 1;
            continue;
        }
        in_module_asm = false;
        let Some(def) = DEFINE.captures(line) else {
            i += 1;
            continue;
        };
        let prefix = def.get(1).unwrap().as_str();
        let words: Vec<&str> = prefix.split_whitespace().collect();
        let visibility = if words.iter().any(|w| *w == "internal" || *w == "private") {
            IrVisibility::Local
        } else if words.contains(&"hidden") {
            IrVisibility::Hidden
        } else {
            IrVisibility::Default
        };
        let name = def[2].trim_start_matches('@').trim_matches('"').to_string();
        let body_start = i + 1;
        let mut end = body_start;
        while end < lines.len() && !lines[end].starts_with('}') {
            end += 1;
        }
        let body: Vec<(usize, &str)> = (body_start..end)
            .map(|n| (n, strip_comment(lines[n]).trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let mut defs = Defs { map: HashMap::new() };
        for (_, l) in &body {
            if let Some(c) = ASSIGN.captures(l) {
                defs.map.insert(c.get(1).unwrap().as_str(), c.get(2).unwrap().as_str());
            }
        }
        let mut sites = IrSiteCensus::default();
        for (n, l) in &body {
            if LABEL.is_match(l) {
                continue;
            }
            let instr = ASSIGN.captures(l).map_or(*l, |c| c.get(2).unwrap().as_str());
            let category = if let Some(c) = CALL.captures(instr) {
                match classify_call(c.get(2).unwrap().as_str(), &c[1], &defs, &facts) {
                    Some(CallKind::Site(cat)) => Some(cat),
                    Some(CallKind::Direct) => None,
                    None => {
                        out.diagnostics.push(IrDiagnostic {
                            source: None,
                            line: n + 1,
                            text: lines[*n].to_string(),
                            reason: "call without a recognisable callee".into(),
                        });
                        None
                    }
                }
            } else if let Some(rest) = instr.strip_prefix("store ") {
                stores_function(rest, &facts).then_some(SiteCategory::CallbackStore)
            } else if instr.starts_with("switch ") {
                Some(SiteCategory::JtSwitch)
            } else if instr.starts_with("indirectbr ") {
                Some(SiteCategory::JtLowered)
            } else {
                None
            };
            if let Some(cat) = category {
                sites.bump(cat);
            }
        }
        out.census += sites;
        out.functions.push(IrFunction {
            name,
            source_file: source_file.clone(),
            visibility,
            sites,
        });
        i = end + 1;
    }
    out
}

pub fn census(ir_text: &str) -> IrSiteCensus {
    analyze_module(ir_text).census
}

/// Sums the census of every `.ll` file under `dir`, in path order.
pub fn census_dir(dir: &Path) -> io::Result<ModuleCensus> {
    let mut files = Vec::new();
    collect_ir(dir, &mut files)?;
    files.sort();
    let mut total = ModuleCensus::default();
    for file in files {
        let text = fs::read_to_string(&file)?;
        let mut module = analyze_module(&text);
        for d in &mut module.diagnostics {
            d.source = Some(file.clone());
        }
        total.absorb(module);
    }
    Ok(total)
}

fn collect_ir(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_ir(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "ll") {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes diagnostics as JSON lines.
pub fn write_diagnostics(path: &Path, diagnostics: &[IrDiagnostic]) -> io::Result<()> {
    let mut text = String::new();
    for d in diagnostics {
        text.push_str(&serde_json::to_string(d).map_err(io::Error::other)?);
        text.push('\n');
    }
    fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "; ModuleID = 't.c'\nsource_filename = \"t.c\"\n";

    fn module(body: &str) -> String {
        format!("{HEADER}declare i32 @ext(i32)\n\ndefine hidden i32 @f(i32 %0, i32 (i32)* %1) {{\n{body}}}\n")
    }

    #[test]
    fn single_switch() {
        let ir = module("  switch i32 %0, label %3 [\n    i32 0, label %2\n  ]\n2:\n  ret i32 1\n3:\n  ret i32 0\n");
        assert_eq!(census(&ir), IrSiteCensus::new(0, 0, 0, 1, 0, 0));
    }

    #[test]
    fn direct_and_intrinsic_calls_are_not_sites() {
        let ir = module(
            "  %3 = call i32 @ext(i32 %0)\n  call void @llvm.dbg.value(metadata i32 %0)\n  %4 = call i32 bitcast (i32 (i32)* @ext to i32 (i32)*)(i32 1)\n  ret i32 %3\n",
        );
        let m = analyze_module(&ir);
        assert_eq!(total_sites(&m.census), 0);
        assert!(m.diagnostics.is_empty());
    }

    #[test]
    fn function_pointer_call() {
        let ir = module("  %3 = alloca i32 (i32)*, align 8\n  store i32 (i32)* %1, i32 (i32)** %3\n  %4 = load i32 (i32)*, i32 (i32)** %3, align 8\n  %5 = call i32 %4(i32 noundef %0)\n  ret i32 %5\n");
        assert_eq!(census(&ir), IrSiteCensus::new(1, 0, 0, 0, 0, 0));
    }

    #[test]
    fn callback_store() {
        let ir = format!(
            "{}@cb = global i32 (i32)* null\n",
            module("  store i32 (i32)* @ext, i32 (i32)** @cb, align 8\n  store i32 %0, i32* null\n  ret i32 0\n")
        );
        assert_eq!(census(&ir), IrSiteCensus::new(0, 0, 1, 0, 0, 0));
    }

    #[test]
    fn lowered_table_call() {
        let ir = format!(
            "{HEADER}@tab = internal constant [2 x i32 (i32)*] [i32 (i32)* @a, i32 (i32)* @b], align 16\n\
declare i32 @a(i32)\ndeclare i32 @b(i32)\n\
define hidden i32 @f(i64 %0) {{\n\
  %2 = getelementptr inbounds [2 x i32 (i32)*], [2 x i32 (i32)*]* @tab, i64 0, i64 %0\n\
  %3 = load i32 (i32)*, i32 (i32)** %2, align 8\n\
  %4 = call i32 %3(i32 1)\n\
  ret i32 %4\n}}\n"
        );
        assert_eq!(census(&ir), IrSiteCensus::new(0, 0, 0, 0, 1, 0));
        // the same table in writable memory is ordinary pointer dispatch
        let writable = ir.replace("internal constant", "internal global");
        assert_eq!(census(&writable), IrSiteCensus::new(1, 0, 0, 0, 0, 0));
    }

    #[test]
    fn indirectbr_and_asm() {
        let ir = format!(
            "{HEADER}module asm \".globl m\"\nmodule asm \"m:\"\n\n\
define internal void @g(i8* %0) {{\n\
  call void asm sideeffect \"nop\", \"~{{dirflag}}\"()\n\
  indirectbr i8* %0, [label %2]\n\
2:\n  ret void\n}}\n"
        );
        let m = analyze_module(&ir);
        assert_eq!(m.census, IrSiteCensus::new(0, 0, 0, 0, 1, 2));
        assert_eq!(m.functions[0].visibility, IrVisibility::Local);
        assert_eq!(m.functions[0].sites.inline_asm, 1);
    }

    #[test]
    fn virtual_call_typed_and_opaque() {
        let typed = format!(
            "{HEADER}define dso_local i32 @_Z4callP1B(%struct.B* %0) {{\n\
  %2 = alloca %struct.B*, align 8\n\
  store %struct.B* %0, %struct.B** %2, align 8\n\
  %3 = load %struct.B*, %struct.B** %2, align 8\n\
  %4 = bitcast %struct.B* %3 to i32 (%struct.B*, i32)***\n\
  %5 = load i32 (%struct.B*, i32)**, i32 (%struct.B*, i32)*** %4, align 8\n\
  %6 = getelementptr inbounds i32 (%struct.B*, i32)*, i32 (%struct.B*, i32)** %5, i64 0\n\
  %7 = load i32 (%struct.B*, i32)*, i32 (%struct.B*, i32)** %6, align 8\n\
  %8 = call noundef i32 %7(%struct.B* noundef %3, i32 noundef 3)\n\
  ret i32 %8\n}}\n"
        );
        let m = analyze_module(&typed);
        assert_eq!(m.census, IrSiteCensus::new(0, 1, 0, 0, 0, 0));
        assert_eq!(m.functions[0].visibility, IrVisibility::Default);
        assert_eq!(m.functions[0].name, "_Z4callP1B");

        let opaque = format!(
            "{HEADER}define hidden i32 @h(ptr %0) {{\n\
  %vtable = load ptr, ptr %0, align 8\n\
  %vfn = getelementptr inbounds ptr, ptr %vtable, i64 2\n\
  %2 = load ptr, ptr %vfn, align 8\n\
  %3 = call i32 %2(ptr %0)\n\
  ret i32 %3\n}}\n"
        );
        assert_eq!(census(&opaque), IrSiteCensus::new(0, 1, 0, 0, 0, 0));

        // a pointer stored in a non-first field is a plain callback table
        let field = opaque.replace(
            "%vtable = load ptr, ptr %0, align 8",
            "%f1 = getelementptr inbounds %struct.S, ptr %0, i32 0, i32 1\n  %vtable = load ptr, ptr %f1, align 8",
        );
        assert_eq!(census(&field), IrSiteCensus::new(1, 0, 0, 0, 0, 0));
    }

    #[test]
    fn malformed_call_goes_to_diagnostics() {
        let ir = module("  %3 = call i32 garbage\n  ret i32 0\n");
        let m = analyze_module(&ir);
        assert_eq!(total_sites(&m.census), 0);
        assert_eq!(m.diagnostics.len(), 1);
        assert_eq!(m.diagnostics[0].line, 6);
    }

    #[test]
    fn sum_identity_rows() {
        let rows = [
            (IrSiteCensus::new(338, 6, 2316, 776, 13448, 70), 16954),
            (IrSiteCensus::new(46, 3, 318, 200, 2873, 0), 3440),
            (IrSiteCensus::new(63, 5, 380, 253, 4241, 0), 4942),
            (IrSiteCensus::new(191, 20, 1461, 1458, 25056, 56), 28242),
            (IrSiteCensus::default(), 0),
        ];
        for (c, total) in rows {
            assert_eq!(total_sites(&c), total);
        }
    }

    fn arb_module(tag: u32) -> impl Strategy<Value = String> {
        let instr = prop_oneof![
            Just("  %x = load i32 (i32)*, i32 (i32)** %p\n  %y = call i32 %x(i32 1)\n".to_string()),
            Just("  store i32 (i32)* @cbk, i32 (i32)** %p\n".to_string()),
            Just("  switch i32 %a, label %d [\n  ]\n".to_string()),
            Just("  indirectbr i8* %b, []\n".to_string()),
            Just("  call void asm \"\", \"\"()\n".to_string()),
            Just("  %z = call i32 @cbk(i32 2)\n".to_string()),
        ];
        (proptest::collection::vec(instr, 0..8), any::<bool>()).prop_map(move |(body, asm)| {
            let mut s = format!("; ModuleID = 'm{tag}'\nsource_filename = \"m{tag}.c\"\n");
            if asm {
                s.push_str("module asm \"x\"\nmodule asm \"y\"\n");
            }
            s.push_str(&format!("declare i32 @cbk(i32)\ndefine hidden void @f{tag}(i32 %a, i8* %b, i8* %p) {{\n"));
            s.extend(body);
            s.push_str("  ret void\n}\n");
            s
        })
    }

    proptest! {
        #[test]
        fn concatenation_adds(a in arb_module(1), b in arb_module(2)) {
            let joined = format!("{a}{b}");
            prop_assert_eq!(census(&joined), census(&a) + census(&b));
        }

        #[test]
        fn per_function_sites_cover_body_sites(a in arb_module(1)) {
            let m = analyze_module(&a);
            let mut from_functions = IrSiteCensus::default();
            for f in &m.functions {
                from_functions += f.sites;
            }
            let module_asm = u64::from(a.contains("module asm"));
            prop_assert_eq!(total_sites(&from_functions) + module_asm, total_sites(&m.census));
        }
    }
}
