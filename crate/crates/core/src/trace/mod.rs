//! Running commands under ptrace and capturing CFI traps.
//!
//! A trap is captured at the signal-delivery stop, before any handler in the
//! tracee can run. The tracee is never resumed past that stop; the whole
//! traced tree is killed instead.

mod maps;
mod tracer;
mod unwind;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use maps::{parse_maps, MemoryMapping};
pub use tracer::{run_traced, TraceError, TracedCommand};
pub use unwind::{unwind_frames, MemoryReader, MAX_RETURN_ADDRESSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrapSignal {
    /// SIGILL, raised by `ud2` on a failed CFI check.
    IllegalInstruction,
    /// SIGTRAP from `int3`; the reported PC is one past the instruction.
    BreakpointTrap,
}

/// Address of the trapping instruction given the PC the kernel reported.
pub fn correct_pc(signal: TrapSignal, raw_pc: u64) -> u64 {
    match signal {
        TrapSignal::IllegalInstruction => raw_pc,
        TrapSignal::BreakpointTrap => raw_pc.wrapping_sub(1),
    }
}

/// General-purpose registers of the stopped thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registers {
    pub rip: u64,
    pub rsp: u64,
    pub rbp: u64,
    pub rax: u64,
    pub rbx: u64,
    pub rcx: u64,
    pub rdx: u64,
    pub rsi: u64,
    pub rdi: u64,
    pub r8: u64,
    pub r9: u64,
    pub r10: u64,
    pub r11: u64,
    pub r12: u64,
    pub r13: u64,
    pub r14: u64,
    pub r15: u64,
    pub eflags: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapEvent {
    pub signal: TrapSignal,
    pub raw_pc: u64,
    pub fault_pc: u64,
    /// At most two entries, innermost first.
    pub return_addresses: Vec<u64>,
    pub registers: Registers,
    /// Image whose mapping contains `fault_pc`.
    pub binary: PathBuf,
    pub pid: i32,
    /// Process memory map at the time of the trap.
    pub mappings: Vec<MemoryMapping>,
    pub test_id: Option<String>,
}

impl TrapEvent {
    pub fn is_cfi(&self) -> bool {
        self.signal == TrapSignal::IllegalInstruction
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail")]
pub enum OutcomeKind {
    Exited(i32),
    Trapped(Box<TrapEvent>),
    TimedOut,
    /// Terminated by a signal other than a captured trap.
    Signalled(i32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub kind: OutcomeKind,
    pub stdout_digest: String,
    pub stderr_digest: String,
    pub wall_time: f64,
}

impl TraceOutcome {
    pub fn passed(&self) -> bool {
        self.kind == OutcomeKind::Exited(0)
    }

    pub fn trap(&self) -> Option<&TrapEvent> {
        match &self.kind {
            OutcomeKind::Trapped(event) => Some(event),
            _ => None,
        }
    }

    pub fn trapped_cfi(&self) -> bool {
        self.trap().is_some_and(TrapEvent::is_cfi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pc_examples() {
        assert_eq!(correct_pc(TrapSignal::IllegalInstruction, 0x401234), 0x401234);
        assert_eq!(correct_pc(TrapSignal::BreakpointTrap, 0x401235), 0x401234);
        assert_eq!(correct_pc(TrapSignal::IllegalInstruction, 0), 0);
    }

    proptest! {
        #[test]
        fn pc_correction(addr in 1u64..=u64::MAX) {
            prop_assert_eq!(correct_pc(TrapSignal::IllegalInstruction, addr), addr);
            prop_assert_eq!(correct_pc(TrapSignal::BreakpointTrap, addr), addr - 1);
        }
    }
}
