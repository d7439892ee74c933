#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use std::time::Duration;

use ifrm::packages::{self, add_counter};
use ifrm::runtime::{CarrierMode, RuntimeConfig, RuntimeContext};
use ifrm::vm::HostTable;
use rand::Rng;
use tempfile::TempDir;

/// A package directory holding the built-in packages.
pub fn lib_dir() -> TempDir {
    let dir = TempDir::new().unwrap();
    packages::install(dir.path()).unwrap();
    dir
}

/// A runtime whose host table counts `ctr_inc` calls.
pub fn counting_runtime(dir: &Path, mode: CarrierMode) -> (RuntimeContext, Arc<AtomicU64>) {
    counting_runtime_with(dir, mode, Duration::from_millis(50))
}

pub fn counting_runtime_with(
    dir: &Path,
    mode: CarrierMode,
    poll_timeout: Duration,
) -> (RuntimeContext, Arc<AtomicU64>) {
    let counter = Arc::new(AtomicU64::new(0));
    let mut host = HostTable::with_std();
    add_counter(&mut host, Arc::clone(&counter));
    let cfg = RuntimeConfig::new(dir).mode(mode).poll_timeout(poll_timeout);
    (RuntimeContext::new(cfg, host), counter)
}

/// Reference semantics for straight-line programs, written from the opcode
/// table alone and sharing no code with the interpreter.
pub mod oracle {
    use super::*;

    pub const MEM: usize = 16;
    pub const LOCALS: u8 = 4;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Op {
        Push(i64),
        Pop,
        Dup,
        Swap,
        /// Raw opcode 0x10..=0x1B.
        Bin(u8),
        Get(u8),
        Set(u8),
        /// Raw opcode 0x30..=0x37.
        Mem(u8),
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Fault {
        DivByZero,
        OobPayload,
        OobArgs,
    }

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct Outcome {
        pub result: Result<Option<i64>, Fault>,
        pub payload: [u8; MEM],
        pub args: [u8; MEM],
    }

    pub fn encode(ops: &[Op]) -> Vec<u8> {
        let mut out = Vec::new();
        for op in ops {
            match *op {
                Op::Push(v) => {
                    out.push(0x01);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Op::Pop => out.push(0x02),
                Op::Dup => out.push(0x03),
                Op::Swap => out.push(0x04),
                Op::Bin(c) | Op::Mem(c) => out.push(c),
                Op::Get(i) => out.extend_from_slice(&[0x20, i]),
                Op::Set(i) => out.extend_from_slice(&[0x21, i]),
            }
        }
        out.push(0x51);
        out
    }

    fn bin(code: u8, a: i64, b: i64) -> Result<i64, Fault> {
        let (wa, wb) = (a as i128, b as i128);
        let trunc = |v: i128| v as i64;
        let shift = (b as u64 % 64) as u32;
        Ok(match code {
            0x10 => trunc(wa + wb),
            0x11 => trunc(wa - wb),
            0x12 => trunc(wa * wb),
            0x13 | 0x14 if b == 0 => return Err(Fault::DivByZero),
            // i128 keeps MIN / -1 in range; truncating back wraps it.
            0x13 => trunc(wa / wb),
            0x14 => trunc(wa % wb),
            0x15 => a & b,
            0x16 => a | b,
            0x17 => a ^ b,
            0x18 => ((a as u64 as u128 * (1u128 << shift)) % (1u128 << 64)) as u64 as i64,
            0x19 => ((a as u64) / (1u64 << shift)) as i64,
            0x1A => i64::from(a == b),
            0x1B => i64::from(a < b),
            _ => unreachable!("not a binary opcode: {code:#x}"),
        })
    }

    pub fn eval(ops: &[Op], payload: [u8; MEM], args: [u8; MEM]) -> Outcome {
        let mut o = Outcome { result: Ok(None), payload, args };
        let mut st: Vec<i64> = Vec::new();
        let mut locals = [0i64; LOCALS as usize];
        locals[0] = MEM as i64;
        locals[1] = MEM as i64;
        for op in ops {
            match *op {
                Op::Push(v) => st.push(v),
                Op::Pop => {
                    st.pop().unwrap();
                }
                Op::Dup => st.push(*st.last().unwrap()),
                Op::Swap => {
                    let n = st.len();
                    st.swap(n - 1, n - 2);
                }
                Op::Bin(c) => {
                    let b = st.pop().unwrap();
                    let a = st.pop().unwrap();
                    match bin(c, a, b) {
                        Ok(v) => st.push(v),
                        Err(f) => {
                            o.result = Err(f);
                            return o;
                        }
                    }
                }
                Op::Get(i) => st.push(locals[i as usize]),
                Op::Set(i) => locals[i as usize] = st.pop().unwrap(),
                Op::Mem(c) => {
                    let args_space = c >= 0x34;
                    let width: i64 = if c % 2 == 0 { 1 } else { 8 };
                    let store = matches!(c, 0x32 | 0x33 | 0x36 | 0x37);
                    let off = st.pop().unwrap();
                    let value = if store { Some(st.pop().unwrap()) } else { None };
                    if off < 0 || off > MEM as i64 - width {
                        o.result = Err(if args_space { Fault::OobArgs } else { Fault::OobPayload });
                        return o;
                    }
                    let mem = if args_space { &mut o.args } else { &mut o.payload };
                    let range = off as usize..(off + width) as usize;
                    match value {
                        Some(v) => {
                            let bytes = v.to_le_bytes();
                            mem[range.clone()].copy_from_slice(&bytes[..width as usize]);
                        }
                        None => {
                            let mut b = [0u8; 8];
                            b[..width as usize].copy_from_slice(&mem[range]);
                            st.push(i64::from_le_bytes(b));
                        }
                    }
                }
            }
        }
        o.result = Ok(st.last().copied());
        o
    }

    fn operand(rng: &mut impl Rng) -> i64 {
        match rng.gen_range(0..6) {
            0 => rng.gen_range(-4..=4),
            1 => rng.gen_range(0..70),
            2 => *[i64::MIN, i64::MAX, -1, 0, 1].get(rng.gen_range(0..5)).unwrap(),
            _ => rng.gen(),
        }
    }

    /// A random program that never under- or overflows the stack and only
    /// names existing locals. Division by zero and out-of-range memory
    /// offsets are left in on purpose.
    pub fn program(rng: &mut impl Rng, max_len: usize) -> Vec<Op> {
        let len = rng.gen_range(1..=max_len);
        let mut ops = Vec::with_capacity(len);
        let mut depth = 0usize;
        for _ in 0..len {
            let op = loop {
                let cand = match rng.gen_range(0..10) {
                    0 | 1 => Op::Push(operand(rng)),
                    2 => Op::Pop,
                    3 => Op::Dup,
                    4 => Op::Swap,
                    5 | 6 => Op::Bin(rng.gen_range(0x10..=0x1B)),
                    7 => Op::Get(rng.gen_range(0..LOCALS)),
                    8 => Op::Set(rng.gen_range(0..LOCALS)),
                    _ => {
                        // Memory ops get an offset pushed right before them.
                        if depth < 1 {
                            continue;
                        }
                        ops.push(Op::Push(rng.gen_range(-1..=(MEM as i64))));
                        depth += 1;
                        Op::Mem(rng.gen_range(0x30..=0x37))
                    }
                };
                let (need, delta): (usize, isize) = match cand {
                    Op::Push(_) | Op::Get(_) => (0, 1),
                    Op::Pop | Op::Set(_) => (1, -1),
                    Op::Dup => (1, 1),
                    Op::Swap => (2, 0),
                    Op::Bin(_) => (2, -1),
                    Op::Mem(0x32 | 0x33 | 0x36 | 0x37) => (2, -2),
                    Op::Mem(_) => (1, 0),
                };
                if depth >= need {
                    depth = (depth as isize + delta) as usize;
                    break cand;
                }
                if let Op::Mem(_) = cand {
                    // Undo the offset push; the op cannot be placed.
                    ops.pop();
                    depth -= 1;
                }
            };
            ops.push(op);
        }
        ops
    }
}

/// Illegal puts against a fresh table, reached through `connect`.
pub mod security {
    use ifrm::transport::{Endpoint, EndpointFault, FaultCode, Perms, RegionTable, TransportError};

    pub struct Case {
        pub name: &'static str,
        pub want: FaultCode,
    }

    /// Runs every illegal-put case and returns one error string per failure.
    pub fn run(connect: &dyn Fn(&std::sync::Arc<RegionTable>) -> Endpoint) -> Vec<String> {
        let table = RegionTable::new();
        let rw = table.register_region("rw", 4096, Perms::READ_WRITE).unwrap();
        let ro = table.register_region("ro", 512, Perms::REMOTE_READ).unwrap();
        // Fill with a pattern so stray writes of any value show up.
        let pattern: Vec<u8> = (0..4096u32).map(|i| (i * 7 + 3) as u8).collect();
        let mut setup = connect(&table);
        setup.put_nbi(&pattern, rw.info().base, rw.info().rkey).unwrap();
        setup.flush().unwrap();

        let (w, r) = (rw.info(), ro.info());
        let cases: Vec<(Case, u64, u32, usize)> = vec![
            (Case { name: "wrong rkey", want: FaultCode::BadRkey }, w.base, w.rkey ^ 1, 8),
            (Case { name: "read-only rkey, writable address", want: FaultCode::NoPerm }, w.base, r.rkey, 8),
            (Case { name: "below base", want: FaultCode::OutOfBounds }, w.base - 1, w.rkey, 1),
            (Case { name: "straddles end", want: FaultCode::OutOfBounds }, w.base + w.len - 4, w.rkey, 8),
            (Case { name: "one past end", want: FaultCode::OutOfBounds }, w.base + w.len, w.rkey, 1),
            (Case { name: "far past end", want: FaultCode::OutOfBounds }, w.base + (1 << 30), w.rkey, 16),
            (Case { name: "address wraps", want: FaultCode::OutOfBounds }, u64::MAX - 2, w.rkey, 8),
            (Case { name: "read-only region", want: FaultCode::NoPerm }, r.base, r.rkey, 4),
        ];

        let mut errs = Vec::new();
        for (case, addr, rkey, len) in cases {
            let before_rw = rw.snapshot();
            let before_ro = ro.snapshot();
            let mut ep = connect(&table);
            let mut healthy = connect(&table);
            if ep.put_nbi(&vec![0xAB; len], addr, rkey).is_err() {
                errs.push(format!("{}: put_nbi failed before flush", case.name));
                continue;
            }
            match ep.flush() {
                Err(TransportError::EndpointPoisoned(EndpointFault::Remote { code, .. })) if code == case.want => {}
                other => errs.push(format!("{}: flush gave {other:?}", case.name)),
            }
            if !matches!(ep.put_nbi(&[1], w.base, w.rkey), Err(TransportError::EndpointPoisoned(_))) {
                errs.push(format!("{}: endpoint accepted a put after the fault", case.name));
            }
            if rw.snapshot() != before_rw || ro.snapshot() != before_ro {
                errs.push(format!("{}: region bytes changed", case.name));
            }
            if !rw.guards_intact() || !ro.guards_intact() {
                errs.push(format!("{}: guard canary overwritten", case.name));
            }
            // Other endpoints keep working.
            let last = w.base + w.len - 1;
            let ok = healthy.put_nbi(&[before_rw[4095]], last, w.rkey).and_then(|_| healthy.flush());
            if ok.is_err() {
                errs.push(format!("{}: unrelated endpoint affected: {ok:?}", case.name));
            }
        }
        errs
    }
}
