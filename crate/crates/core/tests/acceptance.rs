//! Acceptance criteria 1 to 10, one verdict line each.
//!
//! Runs without the libtest harness so every line reaches the terminal.
//! Exits non-zero when any criterion fails.

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};

use cfi_heal::census::{total_sites, IrSiteCensus, IrVisibility};
use cfi_heal::coverage::{compute_coverage, raw_percentages, FunctionInfo};
use cfi_heal::escalation::{LadderLevel, ViolationStatus};
use cfi_heal::harness::{classify, FailureClass, TestResult};
use cfi_heal::ignorelist::{self, EntryKind, Rule};
use cfi_heal::pipeline::heal;
use cfi_heal::trace::{
    correct_pc, run_traced, unwind_frames, OutcomeKind, Registers, TraceOutcome, TracedCommand,
    TrapEvent, TrapSignal, MAX_RETURN_ADDRESSES,
};

// tolerances and budgets
const PROPERTY_CASES: u32 = 2_000;
const COVERAGE_RAW_TOLERANCE: f64 = 0.01;
const FAST_BUDGET: Duration = Duration::from_secs(1);
const TRAP_BUDGET: Duration = Duration::from_secs(5);
const HEAL_BUDGET: Duration = Duration::from_secs(120);
const ESCALATION_BUDGET: Duration = Duration::from_secs(300);

type Verdict = Result<String, String>;
type Criterion = (u32, &'static str, Duration, fn() -> Verdict);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner() -> TestRunner {
    TestRunner::new(RunnerConfig {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..RunnerConfig::default()
    })
}

fn criterion_1() -> Verdict {
    // (six census categories, indirect call sites from the size table)
    let rows = [
        ("coreutils", [338, 6, 2316, 776, 13448, 70], 16954),
        ("diffutils", [46, 3, 318, 200, 2873, 0], 3440),
        ("findutils", [63, 5, 380, 253, 4241, 0], 4942),
        ("util-linux", [191, 20, 1461, 1458, 25056, 56], 28242),
    ];
    for (project, c, expected) in rows {
        let census = IrSiteCensus::new(c[0], c[1], c[2], c[3], c[4], c[5]);
        let got = total_sites(&census);
        check(got == expected, || format!("{project}: total_sites = {got}, expected {expected}"))?;
    }
    Ok("16954, 3440, 4942, 28242 reproduced".into())
}

fn criterion_2() -> Verdict {
    let mut r = runner();
    r.run(&any::<u64>(), |pc| {
        prop_assert_eq!(correct_pc(TrapSignal::IllegalInstruction, pc), pc);
        if pc > 0 {
            prop_assert_eq!(correct_pc(TrapSignal::BreakpointTrap, pc), pc - 1);
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    for pc in [1u64, 0x40_1000, u64::MAX] {
        check(correct_pc(TrapSignal::BreakpointTrap, pc) == pc - 1, || format!("breakpoint at {pc:#x}"))?;
    }
    Ok(format!("{PROPERTY_CASES} sampled addresses"))
}

fn criterion_3() -> Verdict {
    let regs = |rbp| Registers { rbp, ..Default::default() };
    let mem = |words: &[(u64, u64)]| {
        let map: HashMap<u64, u64> = words.iter().copied().collect();
        move |a: u64| map.get(&a).copied()
    };

    let (fp0, fp1) = (0x7ffe_1000u64, 0x7ffe_1040u64);
    let two = unwind_frames(&regs(fp0), &mem(&[(fp0 + 8, 0x401a), (fp0, fp1), (fp1 + 8, 0x402b)]));
    check(two == [0x401a, 0x402b], || format!("two-frame chain gave {two:x?}"))?;

    let down = unwind_frames(&regs(fp1), &mem(&[(fp1 + 8, 0x401a), (fp1, fp0), (fp0 + 8, 0x402b)]));
    check(down == [0x401a], || format!("descending chain gave {down:x?}"))?;

    let self_loop = unwind_frames(&regs(fp0), &mem(&[(fp0 + 8, 0x401a), (fp0, fp0)]));
    check(self_loop == [0x401a], || format!("self loop gave {self_loop:x?}"))?;

    let unreadable = unwind_frames(&regs(fp0), &mem(&[]));
    check(unreadable.is_empty(), || format!("unreadable frame gave {unreadable:x?}"))?;

    let mut long = Vec::new();
    for i in 0..8u64 {
        let fp = 0x1000 + 0x30 * i;
        long.push((fp, fp + 0x30));
        long.push((fp + 8, 0x9000 + i));
    }
    let deep = unwind_frames(&regs(0x1000), &mem(&long));
    check(deep == [0x9000, 0x9001], || format!("deep chain gave {deep:x?}"))?;

    // random chains against a direct reading of the frame layout
    let mut r = runner();
    let links = proptest::collection::vec((any::<u64>(), any::<bool>(), any::<bool>()), 0..4);
    r.run(&(0u64..1 << 47, links), |(base, links)| {
        let mut words = HashMap::new();
        let mut fp = base;
        for (i, (next, ret_ok, fp_ok)) in links.iter().enumerate() {
            if *ret_ok {
                words.insert(fp.wrapping_add(8), 0x7000 + i as u64);
            }
            if *fp_ok {
                words.insert(fp, *next);
            }
            fp = *next;
        }
        let got = unwind_frames(&regs(base), &|a: u64| words.get(&a).copied());
        prop_assert!(got.len() <= MAX_RETURN_ADDRESSES);
        let mut expected = Vec::new();
        let mut frame = base;
        while expected.len() < 2 {
            let Some(ret) = frame.checked_add(8).and_then(|a| words.get(&a)) else { break };
            expected.push(*ret);
            match words.get(&frame) {
                Some(&next) if next > frame && expected.len() < 2 => frame = next,
                _ => break,
            }
        }
        prop_assert_eq!(got, expected);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(format!("5 fixed chains, {PROPERTY_CASES} random chains"))
}

/// Address of `symbol` as listed in a GNU ld map file.
fn map_address(map: &str, symbol: &str) -> Option<u64> {
    map.lines().find_map(|line| {
        let mut parts = line.split_whitespace();
        let addr = parts.next()?.strip_prefix("0x")?;
        (parts.next()? == symbol && parts.next().is_none()).then(|| u64::from_str_radix(addr, 16).ok())?
    })
}

fn criterion_4() -> Verdict {
    if !cfg!(all(target_os = "linux", target_arch = "x86_64")) {
        return Err("requires Linux x86_64".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exe = dir.path().join("ud2");
    let map = dir.path().join("ud2.map");
    let status = Command::new("cc")
        .args(["-O0", "-no-pie", "-o"])
        .arg(&exe)
        .arg(format!("-Wl,-Map={}", map.display()))
        .arg(common::fixtures().join("ud2/ud2.c"))
        .status()
        .map_err(|e| format!("cc: {e}"))?;
    check(status.success(), || "fixture did not compile".into())?;
    let map_text = fs::read_to_string(&map).map_err(|e| e.to_string())?;
    let expected = map_address(&map_text, "trap_site").ok_or("trap_site missing from linker map")?;

    let cmd = TracedCommand::new(exe.display().to_string(), dir.path());
    let outcome = run_traced(&cmd, Duration::from_secs(4)).map_err(|e| e.to_string())?;
    let OutcomeKind::Trapped(event) = &outcome.kind else {
        return Err(format!("expected a trap, got {:?}", outcome.kind));
    };
    check(event.signal == TrapSignal::IllegalInstruction, || format!("signal {:?}", event.signal))?;
    check(event.fault_pc == expected, || {
        format!("fault_pc {:#x}, linker map says {expected:#x}", event.fault_pc)
    })?;
    Ok(format!("fault_pc {:#x} matches linker map", event.fault_pc))
}

fn outcome(kind: OutcomeKind) -> TraceOutcome {
    TraceOutcome {
        kind,
        stdout_digest: String::new(),
        stderr_digest: String::new(),
        wall_time: 0.0,
    }
}

fn trap(signal: TrapSignal) -> OutcomeKind {
    OutcomeKind::Trapped(Box::new(TrapEvent {
        signal,
        raw_pc: 0x1000,
        fault_pc: 0x1000,
        return_addresses: vec![],
        registers: Registers::default(),
        binary: PathBuf::from("/bin/app"),
        pid: 1,
        mappings: vec![],
        test_id: None,
    }))
}

fn criterion_5() -> Verdict {
    use FailureClass::*;
    let baselines = [
        ("pass", OutcomeKind::Exited(0), true),
        ("fail/exit", OutcomeKind::Exited(1), false),
        ("fail/segv", OutcomeKind::Signalled(11), false),
        ("fail/timeout", OutcomeKind::TimedOut, false),
    ];
    // CFI outcome, expected class when the baseline passed
    let cfis = [
        ("pass", OutcomeKind::Exited(0), Pass),
        ("exit 2", OutcomeKind::Exited(2), FunctionalNonCfi),
        ("SIGILL", trap(TrapSignal::IllegalInstruction), CfiPolicyViolation),
        ("SIGSEGV", OutcomeKind::Signalled(11), FunctionalNonCfi),
        ("SIGTRAP", trap(TrapSignal::BreakpointTrap), FunctionalNonCfi),
        ("timeout", OutcomeKind::TimedOut, FunctionalNonCfi),
    ];
    let mut cells = 0;
    for (bname, bkind, bpass) in &baselines {
        for (cname, ckind, when_pass) in &cfis {
            let b = TestResult::new("t", "./t", outcome(bkind.clone()));
            let c = TestResult::new("t", "./t", outcome(ckind.clone()));
            let expected = if *bpass { *when_pass } else { BaselineFailure };
            let got = classify(&b, &c).map_err(|e| e.to_string())?;
            check(got == expected, || format!("({bname}, {cname}) -> {got:?}, expected {expected:?}"))?;
            cells += 1;
        }
    }
    let other = TestResult::new("u", "./u", outcome(OutcomeKind::Exited(0)));
    let t = TestResult::new("t", "./t", outcome(OutcomeKind::Exited(0)));
    check(classify(&t, &other).is_err(), || "mismatched ids were classified".into())?;
    Ok(format!("{cells} cells, mismatched ids rejected"))
}

fn criterion_6() -> Verdict {
    common::toolchain_ready()?;
    // manual single-entry oracle
    check(common::trial("l0", "fun:dispatch", "1") == "0", || "fun:dispatch does not fix the fixture by hand".into())?;
    check(common::trial("l0", "fun:main", "1") == "132", || "fixture should still trap with an unrelated entry".into())?;

    let (_tmp, root) = common::scratch("l0");
    let out = heal(&common::config(&root)).map_err(|e| e.to_string())?;
    let rules = out.state.ignorelist.active_rules();
    check(rules == [Rule::fun("dispatch")], || format!("active entries {rules:?}"))?;
    check(out.report.fixed == 1 && out.report.unresolvable == 0, || {
        format!("fixed {}, unresolvable {}", out.report.fixed, out.report.unresolvable)
    })?;
    let on_disk = fs::read_to_string(root.join("cfi-report/cfi.ignorelist")).map_err(|e| e.to_string())?;
    check(on_disk == "fun:dispatch\n", || format!("ignorelist file holds {on_disk:?}"))?;
    for arg in ["0", "1"] {
        let code = common::run_app(&root, arg);
        check(code == 0, || format!("post-repair ./app {arg} exited {code}"))?;
    }
    check(out.exit_code() == 0, || "heal exit code non-zero".into())?;
    Ok("healed with fun:dispatch, suite passes".into())
}

fn criterion_7() -> Verdict {
    common::toolchain_ready()?;
    let (_tmp, root) = common::scratch("l3");
    let out = heal(&common::config(&root)).map_err(|e| e.to_string())?;
    let [v] = out.state.violations.as_slice() else {
        return Err(format!("{} violations, expected 1", out.state.violations.len()));
    };
    check(v.ladder_level == LadderLevel::L3 && v.status == ViolationStatus::Fixed(LadderLevel::L3), || {
        format!("stopped at {} with status {:?}", v.ladder_level, v.status)
    })?;
    let rules = out.state.ignorelist.active_rules();
    check(rules == [Rule::src("src/ops.c")], || format!("active entries {rules:?}"))?;

    // the chain the fixture was written with: main -> run_case -> dispatch
    let lower: Vec<Rule> = [LadderLevel::L0, LadderLevel::L1, LadderLevel::L2]
        .iter()
        .filter_map(|&l| v.rule_for(l))
        .collect();
    let chain = [Rule::fun("dispatch"), Rule::fun("run_case"), Rule::fun("main")];
    check(lower == chain, || format!("L0..L2 entries {lower:?}"))?;
    for rule in &chain {
        let status = common::trial("l3", &rule.to_string(), "1");
        check(status == "132", || format!("oracle: {rule} alone gives {status}, expected a SIGILL kill"))?;
    }
    let status = common::trial("l3", "src:src/ops.c", "1");
    check(status == "0", || format!("oracle: src:src/ops.c gives {status}"))?;
    Ok("terminated at L3; oracle confirms L0..L2 each fail".into())
}

fn criterion_8() -> Verdict {
    common::toolchain_ready()?;
    let (_tmp, root) = common::scratch("vislib");
    let cfg = common::config(&root);
    let first = heal(&cfg).map_err(|e| e.to_string())?;
    let ledger = &first.report.ledger;
    check(ledger.iterations() == 2, || format!("{} repair iterations", ledger.iterations()))?;
    check(ledger.patches.len() == 2 && first.new_patches == 2, || {
        format!("{} patches in ledger, {} new", ledger.patches.len(), first.new_patches)
    })?;
    let mut symbols: Vec<&str> = ledger.patches.iter().map(|p| p.symbol.as_str()).collect();
    symbols.sort();
    check(symbols == ["a_api", "b_api"], || format!("patched {symbols:?}"))?;
    let again = heal(&cfg).map_err(|e| e.to_string())?;
    check(again.new_patches == 0, || format!("re-run applied {} patches", again.new_patches))?;
    check(common::run_app(&root, "") == 0, || "healed app fails".into())?;
    Ok("2 iterations, 2 patches, re-run applies 0".into())
}

fn criterion_9() -> Verdict {
    // per-class (functions, call sites) chosen to land on the published shares
    let classes = [(8629u64, 25265u64), (1054, 2127), (317, 850)];
    let mut functions = Vec::new();
    for (class, &(count, sites)) in classes.iter().enumerate() {
        for i in 0..count {
            // spread sites evenly, remainder to the first functions
            let share = sites / count + u64::from(i < sites % count);
            let (name, file, visibility) = match class {
                0 => (format!("p{i}"), "core.c".to_string(), IrVisibility::Hidden),
                1 => (format!("d{i}"), "api.c".to_string(), IrVisibility::Default),
                _ => (format!("g{i}"), format!("legacy{}.c", i % 7), IrVisibility::Hidden),
            };
            functions.push(FunctionInfo { name, file: Some(file), call_site_count: share, visibility });
        }
    }
    let rules: Vec<Rule> = (0..7).map(|k| Rule::src(format!("legacy{k}.c"))).collect();
    let core = compute_coverage(&functions, &rules, &[]);

    let target_f = [86.29, 10.54, 3.17];
    let target_s = [89.46, 7.53, 3.01];
    for (what, counts, target) in [
        ("per function", core.function_counts, target_f),
        ("per call site", core.call_site_counts, target_s),
    ] {
        let raw = raw_percentages(counts);
        for k in 0..3 {
            check((raw[k] - target[k]).abs() <= COVERAGE_RAW_TOLERANCE, || {
                format!("{what}: raw share {k} = {:.4}, target {}", raw[k], target[k])
            })?;
        }
    }
    let f = core.per_function.hundredths();
    let s = core.per_call_site.hundredths();
    check(f == [8629, 1054, 317], || format!("per function {f:?}"))?;
    check(s == [8946, 753, 301], || format!("per call site {s:?}"))?;
    check(f.iter().sum::<u64>() == 10_000 && s.iter().sum::<u64>() == 10_000, || "triples do not sum to 100.00".into())?;
    Ok(format!(
        "({:.2}, {:.2}, {:.2}) / ({:.2}, {:.2}, {:.2})",
        core.per_function.protected,
        core.per_function.default_visibility,
        core.per_function.ignored,
        core.per_call_site.protected,
        core.per_call_site.default_visibility,
        core.per_call_site.ignored
    ))
}

fn criterion_10() -> Verdict {
    const ALPHABET: &[u8] = b"abcxyzAZ_019./*-";
    let pattern = proptest::collection::vec(0..ALPHABET.len(), 1..12)
        .prop_map(|ix| ix.into_iter().map(|i| ALPHABET[i] as char).collect::<String>());
    let rule = (any::<bool>(), pattern).prop_map(|(fun, p)| {
        if fun {
            Rule::fun(p)
        } else {
            Rule::src(p)
        }
    });
    let mut r = runner();
    r.run(&proptest::collection::vec(rule, 0..24), |rules| {
        let once = ignorelist::render(&rules);
        let reparsed = ignorelist::parse(&once).expect("rendered text parses");
        prop_assert_eq!(&ignorelist::render(&reparsed), &once);
        // any order of the same set renders identically
        let mut reversed = rules.clone();
        reversed.reverse();
        prop_assert_eq!(&ignorelist::render(&reversed), &once);
        // sorted with no duplicates
        let lines: Vec<&str> = once.lines().collect();
        let key = |l: &str| -> (bool, String) {
            let (k, p) = l.split_once(':').unwrap();
            (k == "src", p.to_string())
        };
        let strictly_sorted = lines.windows(2).all(|w| key(w[0]) < key(w[1]));
        prop_assert!(strictly_sorted, "not in normal form: {:?}", lines);
        prop_assert!(reparsed.iter().all(|r| matches!(r.kind, EntryKind::Fun | EntryKind::Src)));
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(format!("{PROPERTY_CASES} random entry sets"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "census sum identity", FAST_BUDGET, criterion_1),
        (2, "PC correction", FAST_BUDGET, criterion_2),
        (3, "unwinder invariants", FAST_BUDGET, criterion_3),
        (4, "live trap capture", TRAP_BUDGET, criterion_4),
        (5, "classification matrix", FAST_BUDGET, criterion_5),
        (6, "end-to-end repair at L0", HEAL_BUDGET, criterion_6),
        (7, "escalation minimality", ESCALATION_BUDGET, criterion_7),
        (8, "visibility repair convergence", HEAL_BUDGET, criterion_8),
        (9, "coverage arithmetic", FAST_BUDGET, criterion_9),
        (10, "ignorelist normal form", FAST_BUDGET, criterion_10),
    ];
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        let started = Instant::now();
        let mut verdict = run();
        let took = started.elapsed();
        if verdict.is_ok() && took > budget {
            verdict = Err(format!("took {took:.2?}, budget {budget:?}"));
        }
        match verdict {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{took:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{took:.2?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
