use std::fmt;
use std::sync::Arc;

use super::isa::{DecodeError, Instr};
use super::package::{CodeUnit, MAX_IMPORTS, MAX_IMPORT_ARGS, MAX_IMPORT_NAME};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    UnknownOpcode(u8),
    ImmediateOverrun,
    BadJumpTarget,
    BadLocal(u8),
    BadImport(u8),
    TooManyImports,
    /// An import declaration breaks the name or arity limits; the offset is
    /// the import's index.
    BadImportDecl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Invalid {
    pub reason: InvalidReason,
    pub offset: usize,
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at offset {}", self.reason, self.offset)
    }
}

impl std::error::Error for Invalid {}

/// A code unit that passed [`validate_code_unit`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidCodeUnit {
    unit: Arc<CodeUnit>,
    boundaries: Arc<[bool]>,
}

impl ValidCodeUnit {
    pub fn new(unit: CodeUnit) -> Result<Self, Invalid> {
        let boundaries = validate_code_unit(&unit)?;
        Ok(ValidCodeUnit { unit: Arc::new(unit), boundaries: boundaries.into() })
    }

    pub fn unit(&self) -> &CodeUnit {
        &self.unit
    }

    /// `true` at every offset where an instruction starts.
    pub fn boundaries(&self) -> &[bool] {
        &self.boundaries
    }
}

/// Statically checks a code unit. On success returns, per code offset,
/// whether an instruction starts there.
pub fn validate_code_unit(unit: &CodeUnit) -> Result<Vec<bool>, Invalid> {
    if unit.imports.len() > MAX_IMPORTS {
        return Err(Invalid { reason: InvalidReason::TooManyImports, offset: 0 });
    }
    for (i, imp) in unit.imports.iter().enumerate() {
        let name_ok = !imp.name.is_empty()
            && imp.name.len() <= MAX_IMPORT_NAME
            && imp.name.bytes().all(crate::frame::is_name_byte);
        if !name_ok || imp.n_args > MAX_IMPORT_ARGS {
            return Err(Invalid { reason: InvalidReason::BadImportDecl, offset: i });
        }
    }

    let code = &unit.code;
    let mut boundary = vec![false; code.len()];
    let mut jumps = Vec::new();
    let mut pc = 0;
    while pc < code.len() {
        let (instr, len) = Instr::decode(code, pc).map_err(|e| Invalid {
            reason: match e {
                DecodeError::UnknownOpcode(b) => InvalidReason::UnknownOpcode(b),
                DecodeError::ImmediateOverrun => InvalidReason::ImmediateOverrun,
            },
            offset: pc,
        })?;
        boundary[pc] = true;
        match instr {
            Instr::LocalGet(i) | Instr::LocalSet(i) if i >= unit.n_locals => {
                return Err(Invalid { reason: InvalidReason::BadLocal(i), offset: pc });
            }
            Instr::CallImport(i) if i as usize >= unit.imports.len() => {
                return Err(Invalid { reason: InvalidReason::BadImport(i), offset: pc });
            }
            Instr::Jmp(rel) | Instr::Jz(rel) => jumps.push((pc, (pc + len) as i64 + rel as i64)),
            _ => {}
        }
        pc += len;
    }
    for (at, target) in jumps {
        let ok = target >= 0 && (target as usize) < code.len() && boundary[target as usize];
        if !ok {
            return Err(Invalid { reason: InvalidReason::BadJumpTarget, offset: at });
        }
    }
    Ok(boundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::*;
    use crate::vm::Import;

    fn unit(code: Vec<u8>) -> CodeUnit {
        CodeUnit { imports: vec![Import::new("f", 0, false)], n_locals: 2, code }
    }

    fn reason(code: Vec<u8>) -> Option<InvalidReason> {
        validate_code_unit(&unit(code)).err().map(|e| e.reason)
    }

    #[test]
    fn accepts_ret_and_empty() {
        assert_eq!(reason(vec![RET]), None);
        assert_eq!(reason(vec![]), None);
    }

    #[test]
    fn jump_into_an_immediate() {
        // JMP +3 lands inside the PUSH immediate that follows.
        let mut code = vec![JMP, 3, 0, 0, 0, PUSH];
        code.extend_from_slice(&[0; 8]);
        code.push(RET);
        assert_eq!(reason(code), Some(InvalidReason::BadJumpTarget));
    }

    #[test]
    fn jump_bounds() {
        assert_eq!(reason(vec![JMP, 0xFB, 0xFF, 0xFF, 0xFF]), None); // self loop
        assert_eq!(reason(vec![JMP, 0xFA, 0xFF, 0xFF, 0xFF]), Some(InvalidReason::BadJumpTarget));
        assert_eq!(reason(vec![JZ, 0, 0, 0, 0]), Some(InvalidReason::BadJumpTarget));
        assert_eq!(reason(vec![JZ, 0, 0, 0, 0, RET]), None);
    }

    #[test]
    fn operand_checks() {
        assert_eq!(reason(vec![LOCAL_GET, 2]), Some(InvalidReason::BadLocal(2)));
        assert_eq!(reason(vec![LOCAL_SET, 1, RET]), None);
        assert_eq!(reason(vec![CALL_IMPORT, 1]), Some(InvalidReason::BadImport(1)));
        assert_eq!(reason(vec![0x05]), Some(InvalidReason::UnknownOpcode(5)));
        assert_eq!(reason(vec![PUSH, 1]), Some(InvalidReason::ImmediateOverrun));
    }

    #[test]
    fn import_limits() {
        let mut u = unit(vec![RET]);
        u.imports = (0..33).map(|i| Import::new(&format!("f{i}"), 0, false)).collect();
        assert_eq!(validate_code_unit(&u).unwrap_err().reason, InvalidReason::TooManyImports);
        u.imports = vec![Import::new("f", 5, false)];
        assert_eq!(validate_code_unit(&u).unwrap_err().reason, InvalidReason::BadImportDecl);
        u.imports = vec![Import::new(&"n".repeat(33), 0, false)];
        assert_eq!(validate_code_unit(&u).unwrap_err().reason, InvalidReason::BadImportDecl);
    }

    #[test]
    fn boundaries_reported() {
        let b = validate_code_unit(&unit(vec![LOCAL_GET, 0, RET])).unwrap();
        assert_eq!(b, vec![true, false, true]);
    }
}
