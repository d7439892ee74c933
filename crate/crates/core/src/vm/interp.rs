use std::fmt;

use super::host::{BoundFunction, HostCall};
use super::isa::{BinOp, DecodeError, Instr, Space, Width};
use super::Memory;

pub const DEFAULT_FUEL: u64 = 10_000_000;
pub const DEFAULT_MAX_STACK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmLimits {
    pub fuel: u64,
    pub max_stack: usize,
}

impl Default for VmLimits {
    fn default() -> Self {
        VmLimits { fuel: DEFAULT_FUEL, max_stack: DEFAULT_MAX_STACK }
    }
}

/// Source-side entry points see the args read-only; target-side `main` may
/// write them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgsAccess {
    ReadOnly,
    ReadWrite,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trap {
    FuelExhausted,
    StackOverflow,
    StackUnderflow,
    DivByZero,
    OobPayload,
    OobArgs,
    ArgsReadOnly,
    UnknownOpcode,
    ImmediateOverrun,
    /// Control reached an offset that is not an instruction boundary.
    BadPc,
    BadLocal,
    BadImport,
    /// Raised by the standard `abort` import with the program's code.
    Abort(i64),
    /// Raised by an application host function.
    Host(String),
}

impl fmt::Display for Trap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::error::Error for Trap {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    /// `Ok` carries the top of the stack at return, if any.
    pub outcome: Result<Option<i64>, Trap>,
    pub fuel_used: u64,
}

struct Stack {
    items: Vec<i64>,
    max: usize,
}

impl Stack {
    #[inline]
    fn push(&mut self, v: i64) -> Result<(), Trap> {
        if self.items.len() >= self.max {
            return Err(Trap::StackOverflow);
        }
        self.items.push(v);
        Ok(())
    }

    #[inline]
    fn pop(&mut self) -> Result<i64, Trap> {
        self.items.pop().ok_or(Trap::StackUnderflow)
    }
}

fn binop(op: BinOp, a: i64, b: i64) -> Result<i64, Trap> {
    Ok(match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => a.wrapping_mul(b),
        BinOp::DivS if b == 0 => return Err(Trap::DivByZero),
        BinOp::DivS => a.wrapping_div(b),
        BinOp::ModS if b == 0 => return Err(Trap::DivByZero),
        BinOp::ModS => a.wrapping_rem(b),
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
        BinOp::Shl => ((a as u64) << (b as u64 & 63)) as i64,
        // Logical shift.
        BinOp::Shr => ((a as u64) >> (b as u64 & 63)) as i64,
        BinOp::Eq => (a == b) as i64,
        BinOp::LtS => (a < b) as i64,
    })
}

fn checked_range(mem: &dyn Memory, off: i64, width: Width, oob: Trap) -> Result<usize, Trap> {
    let w = width.bytes() as u64;
    if off < 0 || (off as u64).saturating_add(w) > mem.size() as u64 {
        return Err(oob);
    }
    Ok(off as usize)
}

fn load(mem: &dyn Memory, at: usize, width: Width) -> i64 {
    match width {
        Width::W1 => mem.load(at) as i64,
        Width::W8 => {
            let mut b = [0u8; 8];
            for (i, slot) in b.iter_mut().enumerate() {
                *slot = mem.load(at + i);
            }
            i64::from_le_bytes(b)
        }
    }
}

fn store(mem: &mut dyn Memory, at: usize, width: Width, v: i64) {
    match width {
        Width::W1 => mem.store(at, v as u8),
        Width::W8 => {
            for (i, b) in v.to_le_bytes().into_iter().enumerate() {
                mem.store(at + i, b);
            }
        }
    }
}

/// Runs a bound function.
///
/// At entry `locals[0]` holds the payload size and `locals[1]` the args
/// size (where the function has that many locals); the rest are zero.
pub fn exec_function(
    bound: &BoundFunction,
    payload: &mut dyn Memory,
    args: &mut dyn Memory,
    access: ArgsAccess,
    limits: &VmLimits,
) -> Execution {
    let mut fuel_used = 0;
    let outcome = run(bound, payload, args, access, limits, &mut fuel_used);
    Execution { outcome, fuel_used }
}

fn run(
    bound: &BoundFunction,
    payload: &mut dyn Memory,
    args: &mut dyn Memory,
    access: ArgsAccess,
    limits: &VmLimits,
    fuel_used: &mut u64,
) -> Result<Option<i64>, Trap> {
    let unit = bound.unit.unit();
    let boundaries = bound.unit.boundaries();
    let code = &unit.code[..];
    let mut locals = vec![0i64; unit.n_locals as usize];
    if let Some(l) = locals.get_mut(0) {
        *l = payload.size() as i64;
    }
    if let Some(l) = locals.get_mut(1) {
        *l = args.size() as i64;
    }
    let mut stack = Stack { items: Vec::with_capacity(64.min(limits.max_stack)), max: limits.max_stack };
    let mut pc = 0usize;

    loop {
        if pc >= code.len() {
            return Ok(stack.items.last().copied());
        }
        if *fuel_used >= limits.fuel {
            return Err(Trap::FuelExhausted);
        }
        *fuel_used += 1;
        if !boundaries[pc] {
            return Err(Trap::BadPc);
        }
        let (instr, len) = Instr::decode(code, pc).map_err(|e| match e {
            DecodeError::UnknownOpcode(_) => Trap::UnknownOpcode,
            DecodeError::ImmediateOverrun => Trap::ImmediateOverrun,
        })?;
        let next = pc + len;
        pc = next;
        match instr {
            Instr::Halt => return Ok(None),
            Instr::Ret => return Ok(stack.items.last().copied()),
            Instr::Push(v) => stack.push(v)?,
            Instr::Pop => {
                stack.pop()?;
            }
            Instr::Dup => {
                let v = stack.pop()?;
                stack.push(v)?;
                stack.push(v)?;
            }
            Instr::Swap => {
                let b = stack.pop()?;
                let a = stack.pop()?;
                stack.push(b)?;
                stack.push(a)?;
            }
            Instr::Bin(op) => {
                let b = stack.pop()?;
                let a = stack.pop()?;
                stack.push(binop(op, a, b)?)?;
            }
            Instr::LocalGet(i) => stack.push(*locals.get(i as usize).ok_or(Trap::BadLocal)?)?,
            Instr::LocalSet(i) => {
                let v = stack.pop()?;
                *locals.get_mut(i as usize).ok_or(Trap::BadLocal)? = v;
            }
            Instr::Load(space, width) => {
                let off = stack.pop()?;
                let v = match space {
                    Space::Payload => load(payload, checked_range(payload, off, width, Trap::OobPayload)?, width),
                    Space::Args => load(args, checked_range(args, off, width, Trap::OobArgs)?, width),
                };
                stack.push(v)?;
            }
            Instr::Store(space, width) => {
                let off = stack.pop()?;
                let v = stack.pop()?;
                match space {
                    Space::Payload => {
                        let at = checked_range(payload, off, width, Trap::OobPayload)?;
                        store(payload, at, width, v);
                    }
                    Space::Args => {
                        if access == ArgsAccess::ReadOnly {
                            return Err(Trap::ArgsReadOnly);
                        }
                        let at = checked_range(args, off, width, Trap::OobArgs)?;
                        store(args, at, width, v);
                    }
                }
            }
            Instr::Jmp(rel) => pc = (next as i64 + rel as i64) as usize,
            Instr::Jz(rel) => {
                if stack.pop()? == 0 {
                    pc = (next as i64 + rel as i64) as usize;
                }
            }
            Instr::CallImport(i) => {
                let f = bound.table.get(i as usize).ok_or(Trap::BadImport)?;
                let n = f.n_args as usize;
                if stack.items.len() < n {
                    return Err(Trap::StackUnderflow);
                }
                let argv: Vec<i64> = stack.items.split_off(stack.items.len() - n);
                let mut call = HostCall { args: &argv, target: args, target_writable: access == ArgsAccess::ReadWrite };
                let r = f.call(&mut call)?;
                if f.has_result {
                    stack.push(r)?;
                }
            }
        }
    }
}
