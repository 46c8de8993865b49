//! ptrace supervisor.
//!
//! All ptrace requests and waits for one traced tree happen on the thread
//! that spawned it (`__WNOTHREAD` keeps other threads' children out of our
//! waits), so several trees can be supervised concurrently from different
//! threads. The whole descendant tree is followed, which covers tests that
//! run the real binary from a shell wrapper.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, trace};
use nix::sys::ptrace;
use nix::unistd::Pid;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::maps::{parse_maps, MemoryMapping};
use super::unwind::{unwind_frames, MemoryReader};
use super::{correct_pc, OutcomeKind, Registers, TraceOutcome, TrapEvent, TrapSignal};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot start traced command `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: io::Error,
    },
    #[error("ptrace request failed for pid {pid}: {errno}")]
    Ptrace { pid: i32, errno: nix::errno::Errno },
    #[error("wait failed: {0}")]
    Wait(nix::errno::Errno),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A shell command line to execute under tracing.
#[derive(Clone, Debug)]
pub struct TracedCommand {
    pub shell_command: String,
    pub cwd: PathBuf,
    pub env: Vec<(String, String)>,
}

impl TracedCommand {
    pub fn new(shell_command: impl Into<String>, cwd: impl AsRef<Path>) -> Self {
        TracedCommand {
            shell_command: shell_command.into(),
            cwd: cwd.as_ref().to_path_buf(),
            env: Vec::new(),
        }
    }
}

/// Reads tracee memory one word at a time with `PTRACE_PEEKDATA`.
struct PeekReader {
    pid: Pid,
}

impl MemoryReader for PeekReader {
    fn read_word(&self, addr: u64) -> Option<u64> {
        ptrace::read(self.pid, addr as ptrace::AddressType)
            .ok()
            .map(|w| w as u64)
    }
}

const TRACE_OPTIONS: ptrace::Options = ptrace::Options::PTRACE_O_TRACEFORK
    .union(ptrace::Options::PTRACE_O_TRACEVFORK)
    .union(ptrace::Options::PTRACE_O_TRACECLONE)
    .union(ptrace::Options::PTRACE_O_TRACEEXEC)
    .union(ptrace::Options::PTRACE_O_EXITKILL);

// Kernel-originated SIGTRAP from int3.
const SI_KERNEL: i32 = 0x80;
const TRAP_BRKPT: i32 = 1;

enum Wait {
    Exited(Pid, i32),
    Signaled(Pid, i32),
    Stopped(Pid, i32),
    Event(Pid, i32),
    NoChildren,
}

fn wait_any() -> Result<Wait, TraceError> {
    loop {
        let mut status: libc::c_int = 0;
        let pid = unsafe { libc::waitpid(-1, &mut status, libc::__WALL | libc::__WNOTHREAD) };
        if pid < 0 {
            let errno = nix::errno::Errno::last();
            match errno {
                nix::errno::Errno::EINTR => continue,
                nix::errno::Errno::ECHILD => return Ok(Wait::NoChildren),
                e => return Err(TraceError::Wait(e)),
            }
        }
        let pid = Pid::from_raw(pid);
        return Ok(if libc::WIFEXITED(status) {
            Wait::Exited(pid, libc::WEXITSTATUS(status))
        } else if libc::WIFSIGNALED(status) {
            Wait::Signaled(pid, libc::WTERMSIG(status))
        } else if libc::WIFSTOPPED(status) {
            let event = (status >> 16) & 0xff;
            if event != 0 {
                Wait::Event(pid, event)
            } else {
                Wait::Stopped(pid, libc::WSTOPSIG(status))
            }
        } else {
            continue;
        });
    }
}

fn resume(pid: Pid, signal: i32) {
    // ESRCH just means the tracee died in the meantime
    unsafe {
        libc::ptrace(
            libc::PTRACE_CONT,
            pid.as_raw(),
            std::ptr::null_mut::<libc::c_void>(),
            signal as libc::c_long as *mut libc::c_void,
        );
    }
}

fn kill_tree(pgid: Pid, known: &Mutex<HashSet<Pid>>) {
    unsafe {
        libc::kill(-pgid.as_raw(), libc::SIGKILL);
    }
    for pid in known.lock().unwrap().iter() {
        unsafe {
            libc::kill(pid.as_raw(), libc::SIGKILL);
        }
    }
}

fn snapshot_registers(pid: Pid) -> Result<Registers, TraceError> {
    let r = ptrace::getregs(pid).map_err(|errno| TraceError::Ptrace {
        pid: pid.as_raw(),
        errno,
    })?;
    Ok(Registers {
        rip: r.rip,
        rsp: r.rsp,
        rbp: r.rbp,
        rax: r.rax,
        rbx: r.rbx,
        rcx: r.rcx,
        rdx: r.rdx,
        rsi: r.rsi,
        rdi: r.rdi,
        r8: r.r8,
        r9: r.r9,
        r10: r.r10,
        r11: r.r11,
        r12: r.r12,
        r13: r.r13,
        r14: r.r14,
        r15: r.r15,
        eflags: r.eflags,
    })
}

fn capture_trap(pid: Pid, signal: TrapSignal) -> Result<TrapEvent, TraceError> {
    let registers = snapshot_registers(pid)?;
    let raw_pc = registers.rip;
    let fault_pc = correct_pc(signal, raw_pc);
    let return_addresses = unwind_frames(&registers, &PeekReader { pid });
    let mappings: Vec<MemoryMapping> = std::fs::read_to_string(format!("/proc/{pid}/maps"))
        .map(|t| parse_maps(&t))
        .unwrap_or_default();
    let binary = mappings
        .iter()
        .find(|m| m.contains(fault_pc))
        .and_then(|m| m.path.clone())
        .or_else(|| std::fs::read_link(format!("/proc/{pid}/exe")).ok())
        .unwrap_or_default();
    debug!(
        "pid {pid}: {signal:?} at {fault_pc:#x} in {} (returns {:x?})",
        binary.display(),
        return_addresses
    );
    Ok(TrapEvent {
        signal,
        raw_pc,
        fault_pc,
        return_addresses,
        registers,
        binary,
        pid: pid.as_raw(),
        mappings,
        test_id: None,
    })
}

/// Classifies a signal-delivery stop. `None` means forward the signal.
fn trap_kind(pid: Pid, signal: i32) -> Option<TrapSignal> {
    let code = ptrace::getsiginfo(pid).ok()?.si_code;
    match signal {
        // user-sent SIGILL (kill, tgkill, sigqueue) has si_code <= 0
        libc::SIGILL if code > 0 => Some(TrapSignal::IllegalInstruction),
        libc::SIGTRAP if code == SI_KERNEL || code == TRAP_BRKPT => {
            Some(TrapSignal::BreakpointTrap)
        }
        _ => None,
    }
}

fn digest(mut file: File) -> io::Result<String> {
    file.seek(SeekFrom::Start(0))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Runs `cmd` under ptrace until it exits, traps, or exceeds `timeout`.
///
/// The first kernel-raised SIGILL (or int3 SIGTRAP) anywhere in the traced
/// tree is captured with registers, two return addresses and the memory map;
/// the tree is then killed without resuming the trapping thread.
pub fn run_traced(cmd: &TracedCommand, timeout: Duration) -> Result<TraceOutcome, TraceError> {
    let stdout = tempfile::tempfile()?;
    let stderr = tempfile::tempfile()?;
    let mut command = Command::new("sh");
    command
        .arg("-c")
        .arg(&cmd.shell_command)
        .current_dir(&cmd.cwd)
        .stdin(Stdio::null())
        .stdout(stdout.try_clone()?)
        .stderr(stderr.try_clone()?);
    for (k, v) in &cmd.env {
        command.env(k, v);
    }
    unsafe {
        command.pre_exec(|| {
            if libc::setpgid(0, 0) != 0 {
                return Err(io::Error::last_os_error());
            }
            ptrace::traceme().map_err(io::Error::from)
        });
    }

    let started = Instant::now();
    let child = command.spawn().map_err(|source| TraceError::Spawn {
        command: cmd.shell_command.clone(),
        source,
    })?;
    let root = Pid::from_raw(child.id() as i32);
    // not waited through `Child`; every wait goes through waitpid below
    drop(child);

    let known: Arc<Mutex<HashSet<Pid>>> = Arc::new(Mutex::new(HashSet::from([root])));
    let timed_out = Arc::new(AtomicBool::new(false));
    let (cancel, cancelled) = mpsc::channel::<()>();
    let watchdog = {
        let known = Arc::clone(&known);
        let timed_out = Arc::clone(&timed_out);
        thread::spawn(move || {
            if let Err(mpsc::RecvTimeoutError::Timeout) = cancelled.recv_timeout(timeout) {
                timed_out.store(true, Ordering::SeqCst);
                kill_tree(root, &known);
            }
        })
    };

    let mut root_started = false;
    let mut outcome: Option<OutcomeKind> = None;
    let mut killing = false;
    // children reported by a fork event before their own first stop
    let mut fresh: HashSet<Pid> = HashSet::new();

    let result = loop {
        let event = match wait_any() {
            Ok(e) => e,
            Err(e) => break Err(e),
        };
        match event {
            Wait::NoChildren => break Ok(()),
            Wait::Exited(pid, code) => {
                known.lock().unwrap().remove(&pid);
                if pid == root {
                    outcome.get_or_insert(OutcomeKind::Exited(code));
                    if !killing {
                        killing = true;
                        kill_tree(root, &known);
                    }
                }
            }
            Wait::Signaled(pid, signo) => {
                known.lock().unwrap().remove(&pid);
                if pid == root {
                    outcome.get_or_insert(OutcomeKind::Signalled(signo));
                    if !killing {
                        killing = true;
                        kill_tree(root, &known);
                    }
                }
            }
            Wait::Event(pid, event) => {
                if matches!(
                    event,
                    libc::PTRACE_EVENT_FORK | libc::PTRACE_EVENT_VFORK | libc::PTRACE_EVENT_CLONE
                ) {
                    if let Ok(new) = ptrace::getevent(pid) {
                        let new = Pid::from_raw(new as i32);
                        if known.lock().unwrap().insert(new) {
                            fresh.insert(new);
                        }
                    }
                }
                if killing {
                    kill_tree(root, &known);
                } else {
                    resume(pid, 0);
                }
            }
            Wait::Stopped(pid, signo) => {
                if killing {
                    known.lock().unwrap().insert(pid);
                    kill_tree(root, &known);
                    continue;
                }
                if pid == root && !root_started {
                    root_started = true;
                    if let Err(errno) = ptrace::setoptions(pid, TRACE_OPTIONS) {
                        kill_tree(root, &known);
                        break Err(TraceError::Ptrace {
                            pid: pid.as_raw(),
                            errno,
                        });
                    }
                    resume(pid, 0);
                    continue;
                }
                let first_stop = known.lock().unwrap().insert(pid) || fresh.remove(&pid);
                if first_stop && signo == libc::SIGSTOP {
                    trace!("new tracee {pid}");
                    resume(pid, 0);
                    continue;
                }
                match trap_kind(pid, signo) {
                    Some(kind) => {
                        let captured = capture_trap(pid, kind);
                        killing = true;
                        kill_tree(root, &known);
                        match captured {
                            Ok(ev) => {
                                outcome = Some(OutcomeKind::Trapped(Box::new(ev)));
                            }
                            Err(e) => break Err(e),
                        }
                    }
                    None => resume(pid, signo),
                }
            }
        }
    };

    let _ = cancel.send(());
    let _ = watchdog.join();
    if result.is_err() {
        // reap whatever is left so no zombie outlives the call
        kill_tree(root, &known);
        while let Ok(w) = wait_any() {
            if matches!(w, Wait::NoChildren) {
                break;
            }
        }
    }
    result?;

    let kind = if timed_out.load(Ordering::SeqCst)
        && !matches!(outcome, Some(OutcomeKind::Trapped(_)) | Some(OutcomeKind::Exited(_)))
    {
        OutcomeKind::TimedOut
    } else {
        outcome.unwrap_or(OutcomeKind::Signalled(libc::SIGKILL))
    };
    Ok(TraceOutcome {
        kind,
        stdout_digest: digest(stdout)?,
        stderr_digest: digest(stderr)?,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cmd: &str) -> TraceOutcome {
        run_traced(&TracedCommand::new(cmd, "/"), Duration::from_secs(20)).unwrap()
    }

    #[test]
    fn clean_exit() {
        let out = run("true");
        assert_eq!(out.kind, OutcomeKind::Exited(0));
        assert!(out.passed());
        let empty = hex::encode(Sha256::digest(b""));
        assert_eq!(out.stdout_digest, empty);
    }

    #[test]
    fn exit_status_and_output_digest() {
        let out = run("echo hi; exit 3");
        assert_eq!(out.kind, OutcomeKind::Exited(3));
        assert_eq!(out.stdout_digest, hex::encode(Sha256::digest(b"hi\n")));
    }

    #[test]
    fn children_are_followed() {
        let out = run("sh -c 'sh -c \"exit 0\"'; exit 7");
        assert_eq!(out.kind, OutcomeKind::Exited(7));
    }

    #[test]
    fn user_sent_sigill_is_not_a_trap() {
        let out = run("kill -ILL $$");
        assert_eq!(out.kind, OutcomeKind::Signalled(libc::SIGILL));
        assert!(!out.trapped_cfi());
    }

    #[test]
    fn other_signal() {
        let out = run("kill -TERM $$");
        assert_eq!(out.kind, OutcomeKind::Signalled(libc::SIGTERM));
    }

    #[test]
    fn timeout_kills_tree() {
        let started = Instant::now();
        let out =
            run_traced(&TracedCommand::new("sleep 30 & sleep 30", "/"), Duration::from_millis(300))
                .unwrap();
        assert_eq!(out.kind, OutcomeKind::TimedOut);
        assert!(started.elapsed() < Duration::from_secs(10));
    }

    #[test]
    fn missing_directory_is_spawn_error() {
        let err = run_traced(
            &TracedCommand::new("true", "/nonexistent/dir"),
            Duration::from_secs(5),
        )
        .unwrap_err();
        assert!(matches!(err, TraceError::Spawn { .. }));
    }
}
