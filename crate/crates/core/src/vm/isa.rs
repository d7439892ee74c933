//! Instruction encoding.
//!
//! One-byte opcodes, little-endian immediates. Jump immediates are relative
//! to the address of the following instruction.

pub const HALT: u8 = 0x00;
pub const PUSH: u8 = 0x01;
pub const POP: u8 = 0x02;
pub const DUP: u8 = 0x03;
pub const SWAP: u8 = 0x04;
pub const ADD: u8 = 0x10;
pub const SUB: u8 = 0x11;
pub const MUL: u8 = 0x12;
pub const DIVS: u8 = 0x13;
pub const MODS: u8 = 0x14;
pub const AND: u8 = 0x15;
pub const OR: u8 = 0x16;
pub const XOR: u8 = 0x17;
pub const SHL: u8 = 0x18;
pub const SHR: u8 = 0x19;
pub const EQ: u8 = 0x1A;
pub const LTS: u8 = 0x1B;
pub const LOCAL_GET: u8 = 0x20;
pub const LOCAL_SET: u8 = 0x21;
pub const LD1_P: u8 = 0x30;
pub const LD8_P: u8 = 0x31;
pub const ST1_P: u8 = 0x32;
pub const ST8_P: u8 = 0x33;
pub const LD1_A: u8 = 0x34;
pub const LD8_A: u8 = 0x35;
pub const ST1_A: u8 = 0x36;
pub const ST8_A: u8 = 0x37;
pub const JMP: u8 = 0x40;
pub const JZ: u8 = 0x41;
pub const CALL_IMPORT: u8 = 0x50;
pub const RET: u8 = 0x51;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    DivS,
    ModS,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    LtS,
}

/// Which region a load or store addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Payload,
    Args,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Width {
    W1,
    W8,
}

impl Width {
    pub fn bytes(self) -> usize {
        match self {
            Width::W1 => 1,
            Width::W8 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    Halt,
    Push(i64),
    Pop,
    Dup,
    Swap,
    Bin(BinOp),
    LocalGet(u8),
    LocalSet(u8),
    Load(Space, Width),
    Store(Space, Width),
    Jmp(i32),
    Jz(i32),
    CallImport(u8),
    Ret,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    UnknownOpcode(u8),
    ImmediateOverrun,
}

const BIN_OPS: [BinOp; 12] = [
    BinOp::Add,
    BinOp::Sub,
    BinOp::Mul,
    BinOp::DivS,
    BinOp::ModS,
    BinOp::And,
    BinOp::Or,
    BinOp::Xor,
    BinOp::Shl,
    BinOp::Shr,
    BinOp::Eq,
    BinOp::LtS,
];

const MEM_OPS: [(Space, Width); 4] =
    [(Space::Payload, Width::W1), (Space::Payload, Width::W8), (Space::Args, Width::W1), (Space::Args, Width::W8)];

impl Instr {
    /// Decodes the instruction at `pc`, returning it and its length.
    #[inline]
    pub fn decode(code: &[u8], pc: usize) -> Result<(Instr, usize), DecodeError> {
        let op = code[pc];
        let imm = |n: usize| code.get(pc + 1..pc + 1 + n).ok_or(DecodeError::ImmediateOverrun);
        let instr = match op {
            HALT => Instr::Halt,
            PUSH => return Ok((Instr::Push(i64::from_le_bytes(imm(8)?.try_into().unwrap())), 9)),
            POP => Instr::Pop,
            DUP => Instr::Dup,
            SWAP => Instr::Swap,
            ADD..=LTS => Instr::Bin(BIN_OPS[(op - ADD) as usize]),
            LOCAL_GET => return Ok((Instr::LocalGet(imm(1)?[0]), 2)),
            LOCAL_SET => return Ok((Instr::LocalSet(imm(1)?[0]), 2)),
            LD1_P..=ST8_A => {
                let rel = op - LD1_P;
                // Opcodes alternate in pairs: loads then stores per space.
                let (space, width) = MEM_OPS[((rel / 4) * 2 + rel % 2) as usize];
                if rel % 4 < 2 {
                    Instr::Load(space, width)
                } else {
                    Instr::Store(space, width)
                }
            }
            JMP => return Ok((Instr::Jmp(i32::from_le_bytes(imm(4)?.try_into().unwrap())), 5)),
            JZ => return Ok((Instr::Jz(i32::from_le_bytes(imm(4)?.try_into().unwrap())), 5)),
            CALL_IMPORT => return Ok((Instr::CallImport(imm(1)?[0]), 2)),
            RET => Instr::Ret,
            other => return Err(DecodeError::UnknownOpcode(other)),
        };
        Ok((instr, 1))
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match *self {
            Instr::Halt => out.push(HALT),
            Instr::Push(v) => {
                out.push(PUSH);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Instr::Pop => out.push(POP),
            Instr::Dup => out.push(DUP),
            Instr::Swap => out.push(SWAP),
            Instr::Bin(op) => out.push(ADD + BIN_OPS.iter().position(|&o| o == op).unwrap() as u8),
            Instr::LocalGet(i) => out.extend_from_slice(&[LOCAL_GET, i]),
            Instr::LocalSet(i) => out.extend_from_slice(&[LOCAL_SET, i]),
            Instr::Load(space, width) | Instr::Store(space, width) => {
                let base = match space {
                    Space::Payload => LD1_P,
                    Space::Args => LD1_A,
                };
                let store = if matches!(self, Instr::Store(..)) { 2 } else { 0 };
                let wide = if width == Width::W8 { 1 } else { 0 };
                out.push(base + store + wide);
            }
            Instr::Jmp(rel) => {
                out.push(JMP);
                out.extend_from_slice(&rel.to_le_bytes());
            }
            Instr::Jz(rel) => {
                out.push(JZ);
                out.extend_from_slice(&rel.to_le_bytes());
            }
            Instr::CallImport(i) => out.extend_from_slice(&[CALL_IMPORT, i]),
            Instr::Ret => out.push(RET),
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Instr::Push(_) => 9,
            Instr::Jmp(_) | Instr::Jz(_) => 5,
            Instr::LocalGet(_) | Instr::LocalSet(_) | Instr::CallImport(_) => 2,
            _ => 1,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instr::Halt => "halt",
            Instr::Push(_) => "push",
            Instr::Pop => "pop",
            Instr::Dup => "dup",
            Instr::Swap => "swap",
            Instr::Bin(op) => op.mnemonic(),
            Instr::LocalGet(_) => "local_get",
            Instr::LocalSet(_) => "local_set",
            Instr::Load(Space::Payload, Width::W1) => "ld1_p",
            Instr::Load(Space::Payload, Width::W8) => "ld8_p",
            Instr::Store(Space::Payload, Width::W1) => "st1_p",
            Instr::Store(Space::Payload, Width::W8) => "st8_p",
            Instr::Load(Space::Args, Width::W1) => "ld1_a",
            Instr::Load(Space::Args, Width::W8) => "ld8_a",
            Instr::Store(Space::Args, Width::W1) => "st1_a",
            Instr::Store(Space::Args, Width::W8) => "st8_a",
            Instr::Jmp(_) => "jmp",
            Instr::Jz(_) => "jz",
            Instr::CallImport(_) => "call",
            Instr::Ret => "ret",
        }
    }

    /// Looks up an operand-free instruction by mnemonic.
    pub fn from_plain_mnemonic(m: &str) -> Option<Instr> {
        let all = [
            Instr::Halt,
            Instr::Pop,
            Instr::Dup,
            Instr::Swap,
            Instr::Ret,
            Instr::Load(Space::Payload, Width::W1),
            Instr::Load(Space::Payload, Width::W8),
            Instr::Store(Space::Payload, Width::W1),
            Instr::Store(Space::Payload, Width::W8),
            Instr::Load(Space::Args, Width::W1),
            Instr::Load(Space::Args, Width::W8),
            Instr::Store(Space::Args, Width::W1),
            Instr::Store(Space::Args, Width::W8),
        ];
        all.into_iter().chain(BIN_OPS.iter().map(|&op| Instr::Bin(op))).find(|i| i.mnemonic() == m)
    }
}

impl BinOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::DivS => "divs",
            BinOp::ModS => "mods",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::Eq => "eq",
            BinOp::LtS => "lts",
        }
    }

    pub fn all() -> &'static [BinOp] {
        &BIN_OPS
    }
}
