//! Frame-pointer walk limited to two return addresses.
//!
//! With frame pointers kept, `[rbp]` holds the caller's saved frame pointer
//! and `[rbp + 8]` the return address. No DWARF CFA evaluation is done.

use super::Registers;

pub const MAX_RETURN_ADDRESSES: usize = 2;

/// Word-granular read access to the tracee. `None` on any failure; partial
/// words are never reassembled.
pub trait MemoryReader {
    fn read_word(&self, addr: u64) -> Option<u64>;
}

impl<F: Fn(u64) -> Option<u64>> MemoryReader for F {
    fn read_word(&self, addr: u64) -> Option<u64> {
        self(addr)
    }
}

/// Returns up to two return addresses, innermost first. A failed read or a
/// frame chain that does not strictly grow truncates the result.
pub fn unwind_frames(regs: &Registers, memory: &impl MemoryReader) -> Vec<u64> {
    let mut out = Vec::with_capacity(MAX_RETURN_ADDRESSES);
    let mut frame = regs.rbp;
    while out.len() < MAX_RETURN_ADDRESSES {
        let Some(ret) = frame.checked_add(8).and_then(|a| memory.read_word(a)) else {
            break;
        };
        out.push(ret);
        if out.len() == MAX_RETURN_ADDRESSES {
            break;
        }
        let Some(next) = memory.read_word(frame) else {
            break;
        };
        if next <= frame {
            break;
        }
        frame = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn regs(rbp: u64) -> Registers {
        Registers {
            rbp,
            ..Default::default()
        }
    }

    fn memory(words: &[(u64, u64)]) -> impl MemoryReader {
        let map: HashMap<u64, u64> = words.iter().copied().collect();
        move |addr: u64| map.get(&addr).copied()
    }

    #[test]
    fn two_frames() {
        let fp0 = 0x7ffd_0000;
        let fp1 = 0x7ffd_0040;
        let mem = memory(&[(fp0 + 8, 0xaaaa), (fp0, fp1), (fp1 + 8, 0xbbbb)]);
        assert_eq!(unwind_frames(&regs(fp0), &mem), vec![0xaaaa, 0xbbbb]);
    }

    #[test]
    fn non_monotonic_chain_truncates() {
        let fp0 = 0x7ffd_0040;
        let mem = memory(&[(fp0 + 8, 0xaaaa), (fp0, 0x7ffd_0000), (0x7ffd_0008, 0xbbbb)]);
        assert_eq!(unwind_frames(&regs(fp0), &mem), vec![0xaaaa]);
        let mem = memory(&[(fp0 + 8, 0xaaaa), (fp0, fp0)]);
        assert_eq!(unwind_frames(&regs(fp0), &mem), vec![0xaaaa]);
    }

    #[test]
    fn unreadable_return_slot() {
        let mem = memory(&[]);
        assert!(unwind_frames(&regs(0x1000), &mem).is_empty());
        assert!(unwind_frames(&regs(u64::MAX - 4), &mem).is_empty());
    }

    #[test]
    fn unreadable_saved_frame_pointer() {
        let mem = memory(&[(0x1008, 0xaaaa)]);
        assert_eq!(unwind_frames(&regs(0x1000), &mem), vec![0xaaaa]);
    }

    #[test]
    fn depth_is_bounded() {
        // a long valid chain still yields two addresses
        let mut words = Vec::new();
        for i in 0..10u64 {
            let fp = 0x1000 + i * 0x20;
            words.push((fp, fp + 0x20));
            words.push((fp + 8, 0x4000 + i));
        }
        let mem = memory(&words);
        assert_eq!(unwind_frames(&regs(0x1000), &mem), vec![0x4000, 0x4001]);
    }

    proptest! {
        #[test]
        fn chain_invariants(
            fp0 in 0u64..1 << 40,
            links in proptest::collection::vec((any::<u64>(), any::<bool>(), any::<bool>()), 0..4),
        ) {
            // random chain: each link is (next fp, ret readable, fp readable)
            let mut words = HashMap::new();
            let mut fp = fp0;
            for (i, (next, ret_ok, fp_ok)) in links.iter().enumerate() {
                if *ret_ok { words.insert(fp.wrapping_add(8), 0x5000 + i as u64); }
                if *fp_ok { words.insert(fp, *next); }
                fp = *next;
            }
            let reader = |a: u64| words.get(&a).copied();
            let chain = unwind_frames(&regs(fp0), &reader);
            prop_assert!(chain.len() <= MAX_RETURN_ADDRESSES);

            // independent re-derivation of the expected chain
            let mut expected = Vec::new();
            if let Some(r0) = words.get(&fp0.wrapping_add(8)).filter(|_| fp0.checked_add(8).is_some()) {
                expected.push(*r0);
                if let Some(fp1) = words.get(&fp0) {
                    if *fp1 > fp0 {
                        if let Some(r1) = fp1.checked_add(8).and_then(|a| words.get(&a)) {
                            expected.push(*r1);
                        }
                    }
                }
            }
            prop_assert_eq!(chain, expected);
        }
    }
}
