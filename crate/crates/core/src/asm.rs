//! Text assembler and disassembler for ifunc packages.
//!
//! ```text
//! ; counter: bumps a host counter on the target
//! .ifunc counter
//! .import ctr_inc 0 0
//! .func get_max_size locals=0
//!     push 0
//!     ret
//! .func payload_init locals=0
//!     push 0
//!     ret
//! .func main locals=0
//!     call ctr_inc
//!     ret
//! ```
//!
//! One instruction per line, `;` starts a comment, `name:` defines a label.
//! Jump operands are labels or signed relative offsets; immediates are
//! decimal or `0x` hex.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::frame::IfuncName;
use crate::vm::isa::Instr;
use crate::vm::{
    parse_package, serialize_package, validate_code_unit, Entry, Function, IfuncPackage, Import, Invalid, PackageError,
    MAX_IMPORT_ARGS,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: syntax error: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic {mnemonic:?}")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: unknown import {name:?}")]
    UnknownImport { line: usize, name: String },
    #[error("undefined label {0:?}")]
    UndefinedLabel(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("missing .func {}", .0.name())]
    MissingFunction(Entry),
    #[error("function {} defined twice", .0.name())]
    DuplicateFunction(Entry),
    #[error("function {} does not validate: {}", .0.name(), .1)]
    InvalidCode(Entry, Invalid),
    #[error(transparent)]
    Malformed(#[from] PackageError),
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::SyntaxError { line, msg: msg.into() }
}

enum Operand {
    None,
    Imm(i64),
    Label(String),
}

struct Line {
    no: usize,
    mnemonic: String,
    operand: Operand,
}

#[derive(Default)]
struct FuncText {
    n_locals: u8,
    labels: HashMap<String, usize>,
    lines: Vec<Line>,
}

/// Parses a decimal or `0x` hex literal. Non-negative literals up to
/// `u64::MAX` are taken as two's-complement bit patterns.
fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let body = body.replace('_', "");
    let abs = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok()?,
        None if body.bytes().all(|b| b.is_ascii_digit()) => body.parse::<u64>().ok()?,
        None => return None,
    };
    if neg {
        i64::try_from(-(abs as i128)).ok()
    } else {
        Some(abs as i64)
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn assemble(text: &str) -> Result<Vec<u8>, AsmError> {
    Ok(serialize_package(&assemble_package(text)?))
}

pub fn assemble_package(text: &str) -> Result<IfuncPackage, AsmError> {
    let mut name: Option<IfuncName> = None;
    let mut imports: Vec<Import> = Vec::new();
    let mut funcs: HashMap<Entry, FuncText> = HashMap::new();
    let mut current: Option<Entry> = None;

    for (idx, raw) in text.lines().enumerate() {
        let no = idx + 1;
        let mut line = raw.split(';').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(directive) = line.strip_prefix('.') {
            let mut parts = directive.split_whitespace();
            match parts.next() {
                Some("ifunc") => {
                    let n = parts.next().ok_or_else(|| syntax(no, ".ifunc needs a name"))?;
                    if name.is_some() {
                        return Err(syntax(no, "more than one .ifunc"));
                    }
                    name = Some(IfuncName::new(n).map_err(|e| syntax(no, e.to_string()))?);
                }
                Some("import") => {
                    let n = parts.next().ok_or_else(|| syntax(no, ".import needs a name"))?;
                    let args = parts
                        .next()
                        .and_then(|a| a.parse::<u8>().ok())
                        .filter(|&a| a <= MAX_IMPORT_ARGS)
                        .ok_or_else(|| syntax(no, "argument count must be 0..=4"))?;
                    let has_result = match parts.next() {
                        Some("1") | Some("true") => true,
                        Some("0") | Some("false") => false,
                        _ => return Err(syntax(no, "has_result must be 0 or 1")),
                    };
                    imports.push(Import::new(n, args, has_result));
                }
                Some("func") => {
                    let which = parts.next().ok_or_else(|| syntax(no, ".func needs a name"))?;
                    let entry =
                        Entry::from_name(which).ok_or_else(|| syntax(no, format!("unknown function {which:?}")))?;
                    let mut f = FuncText::default();
                    if let Some(opt) = parts.next() {
                        let v = opt
                            .strip_prefix("locals=")
                            .and_then(|v| v.parse::<u8>().ok())
                            .ok_or_else(|| syntax(no, "expected locals=N with N in 0..=255"))?;
                        f.n_locals = v;
                    }
                    if funcs.insert(entry, f).is_some() {
                        return Err(AsmError::DuplicateFunction(entry));
                    }
                    current = Some(entry);
                }
                other => return Err(syntax(no, format!("unknown directive {other:?}"))),
            }
            if let Some(extra) = parts.next() {
                return Err(syntax(no, format!("unexpected {extra:?}")));
            }
            continue;
        }

        let entry = current.ok_or_else(|| syntax(no, "instruction outside .func"))?;
        let func = funcs.get_mut(&entry).unwrap();
        if let Some((label, rest)) = line.split_once(':') {
            let label = label.trim();
            if !is_ident(label) {
                return Err(syntax(no, format!("bad label {label:?}")));
            }
            if func.labels.insert(label.to_string(), func.lines.len()).is_some() {
                return Err(AsmError::DuplicateLabel(label.to_string()));
            }
            line = rest.trim();
            if line.is_empty() {
                continue;
            }
        }
        let mut parts = line.split_whitespace();
        let mnemonic = parts.next().unwrap().to_ascii_lowercase();
        let operand = match parts.next() {
            None => Operand::None,
            Some(tok) => match parse_int(tok) {
                Some(v) => Operand::Imm(v),
                None if is_ident(tok) => Operand::Label(tok.to_string()),
                None => return Err(syntax(no, format!("bad operand {tok:?}"))),
            },
        };
        if let Some(extra) = parts.next() {
            return Err(syntax(no, format!("unexpected {extra:?}")));
        }
        func.lines.push(Line { no, mnemonic, operand });
    }

    let name = name.ok_or_else(|| syntax(0, "missing .ifunc"))?;
    let mut built = HashMap::new();
    for entry in Entry::ALL {
        let f = funcs.remove(&entry).ok_or(AsmError::MissingFunction(entry))?;
        built.insert(entry, encode_function(&f, &imports)?);
    }
    let pkg = IfuncPackage {
        name,
        get_max_size: built.remove(&Entry::GetMaxSize).unwrap(),
        payload_init: built.remove(&Entry::PayloadInit).unwrap(),
        main: built.remove(&Entry::Main).unwrap(),
        imports,
    };
    for entry in Entry::ALL {
        validate_code_unit(&pkg.code_unit(entry)).map_err(|e| AsmError::InvalidCode(entry, e))?;
    }
    Ok(pkg)
}

fn encode_function(f: &FuncText, imports: &[Import]) -> Result<Function, AsmError> {
    // Every instruction has a fixed size, so offsets are known before any
    // label is resolved.
    let mut instrs = Vec::with_capacity(f.lines.len());
    for line in &f.lines {
        instrs.push(shape(line, imports)?);
    }
    let mut offsets = Vec::with_capacity(instrs.len() + 1);
    let mut at = 0usize;
    for i in &instrs {
        offsets.push(at);
        at += i.encoded_len();
    }
    offsets.push(at);

    let mut code = Vec::with_capacity(at);
    for (n, (line, mut instr)) in f.lines.iter().zip(instrs).enumerate() {
        if let (Instr::Jmp(rel) | Instr::Jz(rel), Operand::Label(label)) = (&mut instr, &line.operand) {
            let target = *f.labels.get(label).ok_or_else(|| AsmError::UndefinedLabel(label.clone()))?;
            let delta = offsets[target] as i64 - offsets[n + 1] as i64;
            *rel = i32::try_from(delta).map_err(|_| syntax(line.no, "jump too far"))?;
        }
        instr.encode(&mut code);
    }
    Ok(Function { n_locals: f.n_locals, code })
}

/// Builds the instruction for a line, with jump displacements left at zero
/// when they name a label.
fn shape(line: &Line, imports: &[Import]) -> Result<Instr, AsmError> {
    let no = line.no;
    let m = line.mnemonic.as_str();
    let want_none = |i: Instr| match line.operand {
        Operand::None => Ok(i),
        _ => Err(syntax(no, format!("{m} takes no operand"))),
    };
    let imm_u8 = |what: &str| match line.operand {
        Operand::Imm(v) => u8::try_from(v).map_err(|_| syntax(no, format!("{what} out of range"))),
        _ => Err(syntax(no, format!("{m} needs a {what}"))),
    };
    match m {
        "push" => match line.operand {
            Operand::Imm(v) => Ok(Instr::Push(v)),
            _ => Err(syntax(no, "push needs an immediate")),
        },
        "local_get" => Ok(Instr::LocalGet(imm_u8("local index")?)),
        "local_set" => Ok(Instr::LocalSet(imm_u8("local index")?)),
        "jmp" | "jz" => {
            let rel = match &line.operand {
                Operand::Imm(v) => i32::try_from(*v).map_err(|_| syntax(no, "offset out of range"))?,
                Operand::Label(_) => 0,
                _ => return Err(syntax(no, format!("{m} needs a label"))),
            };
            Ok(if m == "jmp" { Instr::Jmp(rel) } else { Instr::Jz(rel) })
        }
        "call" => match &line.operand {
            Operand::Label(name) => imports
                .iter()
                .position(|i| &i.name == name)
                .map(|p| Instr::CallImport(p as u8))
                .ok_or_else(|| AsmError::UnknownImport { line: no, name: name.clone() }),
            Operand::Imm(_) => Ok(Instr::CallImport(imm_u8("import index")?)),
            _ => Err(syntax(no, "call needs an import name")),
        },
        _ => match Instr::from_plain_mnemonic(m) {
            Some(i) => want_none(i),
            None => Err(AsmError::UnknownMnemonic { line: no, mnemonic: m.to_string() }),
        },
    }
}

/// Renders a package as assembler text that re-assembles to the same bytes.
pub fn disassemble(bytes: &[u8]) -> Result<String, AsmError> {
    let pkg = parse_package(bytes)?;
    let mut out = String::new();
    writeln!(out, ".ifunc {}", pkg.name).unwrap();
    for imp in &pkg.imports {
        writeln!(out, ".import {} {} {}", imp.name, imp.n_args, imp.has_result as u8).unwrap();
    }
    for entry in Entry::ALL {
        let unit = pkg.code_unit(entry);
        validate_code_unit(&unit).map_err(|e| AsmError::InvalidCode(entry, e))?;
        writeln!(out, ".func {} locals={}", entry.name(), unit.n_locals).unwrap();
        let code = &unit.code;
        let mut decoded = Vec::new();
        let mut targets = HashSet::new();
        let mut pc = 0;
        while pc < code.len() {
            let (instr, len) = Instr::decode(code, pc).expect("validated");
            if let Instr::Jmp(rel) | Instr::Jz(rel) = instr {
                targets.insert((pc + len) as i64 + rel as i64);
            }
            decoded.push((pc, instr, len));
            pc += len;
        }
        for (pc, instr, len) in decoded {
            if targets.contains(&(pc as i64)) {
                writeln!(out, "L{pc}:").unwrap();
            }
            let operand = match instr {
                Instr::Push(v) => format!(" {v}"),
                Instr::LocalGet(i) | Instr::LocalSet(i) => format!(" {i}"),
                Instr::Jmp(rel) | Instr::Jz(rel) => format!(" L{}", (pc + len) as i64 + rel as i64),
                Instr::CallImport(i) => {
                    let name = &unit.imports[i as usize].name;
                    // Fall back to the index when an earlier import shares the name.
                    if unit.imports.iter().position(|imp| &imp.name == name) == Some(i as usize) {
                        format!(" {name}")
                    } else {
                        format!(" {i}")
                    }
                }
                _ => String::new(),
            };
            writeln!(out, "    {}{operand}", instr.mnemonic()).unwrap();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const COUNTER: &str = "\
.ifunc counter
.import ctr_inc 0 0
.func get_max_size
    push 0
.func payload_init
    push 0
.func main
    call ctr_inc
    ret
";

    #[test]
    fn counter_main_has_two_instructions() {
        let pkg = assemble_package(COUNTER).unwrap();
        assert_eq!(pkg.main.code, vec![0x50, 0x00, 0x51]);
        let bytes = assemble(COUNTER).unwrap();
        assert_eq!(parse_package(&bytes).unwrap(), pkg);
        assert!(disassemble(&bytes).unwrap().contains("call ctr_inc"));
    }

    #[test]
    fn missing_main() {
        let text = COUNTER.split(".func main").next().unwrap();
        assert_eq!(assemble(text), Err(AsmError::MissingFunction(Entry::Main)));
    }

    #[test]
    fn label_errors() {
        let base = ".ifunc t\n.func get_max_size\n.func payload_init\n.func main\n";
        assert_eq!(assemble(&format!("{base}  jmp nowhere\n")), Err(AsmError::UndefinedLabel("nowhere".into())));
        assert_eq!(assemble(&format!("{base}a:\na: ret\n")), Err(AsmError::DuplicateLabel("a".into())));
        assert!(matches!(assemble(&format!("{base}  frob\n")), Err(AsmError::UnknownMnemonic { line: 5, .. })));
        assert!(matches!(assemble(&format!("{base}  push\n")), Err(AsmError::SyntaxError { line: 5, .. })));
        assert!(matches!(assemble(&format!("{base}  call x\n")), Err(AsmError::UnknownImport { .. })));
        assert!(matches!(assemble(&format!("{base}  local_get 3\n")), Err(AsmError::InvalidCode(Entry::Main, _))));
    }

    #[test]
    fn backward_jump_gets_one_label() {
        let text = ".ifunc loop\n.func get_max_size\n.func payload_init\n.func main locals=1\n\
                    top: local_get 0\n jz done\n jmp top\ndone: ret\n";
        let bytes = assemble(text).unwrap();
        let pkg = parse_package(&bytes).unwrap();
        // local_get(2) jz(5) jmp(5) ret
        assert_eq!(&pkg.main.code[7..12], &[0x40, 0xF4, 0xFF, 0xFF, 0xFF]);
        let listing = disassemble(&bytes).unwrap();
        assert!(listing.contains("L0:"));
        assert!(listing.contains("L12:"));
        assert!(listing.contains("jmp L0"));
        assert_eq!(assemble(&listing).unwrap(), bytes);
    }

    #[test]
    fn numeric_forms() {
        assert_eq!(parse_int("0x10"), Some(16));
        assert_eq!(parse_int("-0x10"), Some(-16));
        assert_eq!(parse_int("0xFFFFFFFFFFFFFFFF"), Some(-1));
        assert_eq!(parse_int("-9223372036854775808"), Some(i64::MIN));
        assert_eq!(parse_int("-9223372036854775809"), None);
        assert_eq!(parse_int("9223372036854775807"), Some(i64::MAX));
        assert_eq!(parse_int("abc"), None);
        assert_eq!(parse_int("+1"), None);
        let text = ".ifunc n\n.func get_max_size\n push 0x8000000000000000\n.func payload_init\n.func main\n jmp -5\n";
        let pkg = assemble_package(text).unwrap();
        assert_eq!(pkg.main.code, vec![0x40, 0xFB, 0xFF, 0xFF, 0xFF]);
        let listing = disassemble(&serialize_package(&pkg)).unwrap();
        assert!(listing.contains("push -9223372036854775808"));
    }

    #[test]
    fn disassembling_garbage_fails() {
        assert!(matches!(disassemble(b"IFNC\x01"), Err(AsmError::Malformed(_))));
    }
}
