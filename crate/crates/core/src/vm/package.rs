//! The `.ifn` package file and the inline code-unit encoding.
//!
//! ```text
//! package   := "IFNC" u8:version=1 u8:name_len name imports function{3}
//! imports   := u8:count { u8:name_len name u8:n_args u8:has_result }*
//! function  := u8:n_locals u32:code_len code
//! code unit := imports function          (main only, carried in frames)
//! ```
//!
//! Functions appear in fixed order: get_max_size, payload_init, main.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frame::IfuncName;

pub const PACKAGE_MAGIC: &[u8; 4] = b"IFNC";
pub const PACKAGE_VERSION: u8 = 1;
pub const MAX_IMPORTS: usize = 32;
pub const MAX_IMPORT_NAME: usize = 32;
pub const MAX_IMPORT_ARGS: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Import {
    pub name: String,
    pub n_args: u8,
    pub has_result: bool,
}

impl Import {
    pub fn new(name: &str, n_args: u8, has_result: bool) -> Self {
        Import { name: name.to_string(), n_args, has_result }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Function {
    pub n_locals: u8,
    pub code: Vec<u8>,
}

/// One executable body together with the import table it calls through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeUnit {
    pub imports: Vec<Import>,
    pub n_locals: u8,
    pub code: Vec<u8>,
}

/// The three entry points every ifunc provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entry {
    GetMaxSize,
    PayloadInit,
    Main,
}

impl Entry {
    pub const ALL: [Entry; 3] = [Entry::GetMaxSize, Entry::PayloadInit, Entry::Main];

    pub fn name(self) -> &'static str {
        match self {
            Entry::GetMaxSize => "get_max_size",
            Entry::PayloadInit => "payload_init",
            Entry::Main => "main",
        }
    }

    pub fn from_name(s: &str) -> Option<Entry> {
        Entry::ALL.into_iter().find(|e| e.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IfuncPackage {
    pub name: IfuncName,
    pub imports: Vec<Import>,
    pub get_max_size: Function,
    pub payload_init: Function,
    pub main: Function,
}

impl IfuncPackage {
    pub fn function(&self, entry: Entry) -> &Function {
        match entry {
            Entry::GetMaxSize => &self.get_max_size,
            Entry::PayloadInit => &self.payload_init,
            Entry::Main => &self.main,
        }
    }

    pub fn code_unit(&self, entry: Entry) -> CodeUnit {
        let f = self.function(entry);
        CodeUnit { imports: self.imports.clone(), n_locals: f.n_locals, code: f.code.clone() }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackageError {
    #[error("malformed package at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
}

fn malformed(offset: usize, reason: impl Into<String>) -> PackageError {
    PackageError::Malformed { offset, reason: reason.into() }
}

pub fn package_digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn serialize_package(pkg: &IfuncPackage) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PACKAGE_MAGIC);
    out.push(PACKAGE_VERSION);
    let name = pkg.name.as_str().as_bytes();
    out.push(name.len() as u8);
    out.extend_from_slice(name);
    write_imports(&mut out, &pkg.imports);
    for entry in Entry::ALL {
        write_function(&mut out, pkg.function(entry));
    }
    out
}

pub fn parse_package(bytes: &[u8]) -> Result<IfuncPackage, PackageError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != PACKAGE_MAGIC {
        return Err(malformed(0, "bad magic"));
    }
    let at = r.pos;
    if r.u8()? != PACKAGE_VERSION {
        return Err(malformed(at, "unsupported version"));
    }
    let at = r.pos;
    let n = r.u8()? as usize;
    let raw = r.take(n)?;
    let name = std::str::from_utf8(raw)
        .ok()
        .and_then(|s| IfuncName::new(s).ok())
        .ok_or_else(|| malformed(at, "invalid ifunc name"))?;
    let imports = read_imports(&mut r)?;
    let get_max_size = read_function(&mut r)?;
    let payload_init = read_function(&mut r)?;
    let main = read_function(&mut r)?;
    r.finish()?;
    Ok(IfuncPackage { name, imports, get_max_size, payload_init, main })
}

pub fn serialize_code_unit(unit: &CodeUnit) -> Vec<u8> {
    let mut out = Vec::new();
    write_imports(&mut out, &unit.imports);
    write_function(&mut out, &Function { n_locals: unit.n_locals, code: unit.code.clone() });
    out
}

pub fn parse_code_unit(bytes: &[u8]) -> Result<CodeUnit, PackageError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let imports = read_imports(&mut r)?;
    let f = read_function(&mut r)?;
    r.finish()?;
    Ok(CodeUnit { imports, n_locals: f.n_locals, code: f.code })
}

fn write_imports(out: &mut Vec<u8>, imports: &[Import]) {
    out.push(imports.len() as u8);
    for imp in imports {
        out.push(imp.name.len() as u8);
        out.extend_from_slice(imp.name.as_bytes());
        out.push(imp.n_args);
        out.push(imp.has_result as u8);
    }
}

fn write_function(out: &mut Vec<u8>, f: &Function) {
    out.push(f.n_locals);
    out.extend_from_slice(&(f.code.len() as u32).to_le_bytes());
    out.extend_from_slice(&f.code);
}

fn read_imports(r: &mut Reader<'_>) -> Result<Vec<Import>, PackageError> {
    let at = r.pos;
    let count = r.u8()? as usize;
    if count > MAX_IMPORTS {
        return Err(malformed(at, format!("{count} imports exceeds {MAX_IMPORTS}")));
    }
    let mut imports = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let n = r.u8()? as usize;
        let raw = r.take(n)?;
        if n == 0 || n > MAX_IMPORT_NAME || !raw.iter().copied().all(crate::frame::is_name_byte) {
            return Err(malformed(at, "invalid import name"));
        }
        let name = String::from_utf8(raw.to_vec()).expect("ascii");
        let at = r.pos;
        let n_args = r.u8()?;
        if n_args > MAX_IMPORT_ARGS {
            return Err(malformed(at, format!("import takes {n_args} args, limit is {MAX_IMPORT_ARGS}")));
        }
        let at = r.pos;
        let has_result = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(malformed(at, "has_result must be 0 or 1")),
        };
        imports.push(Import { name, n_args, has_result });
    }
    Ok(imports)
}

fn read_function(r: &mut Reader<'_>) -> Result<Function, PackageError> {
    let n_locals = r.u8()?;
    let len = r.u32()? as usize;
    let code = r.take(len)?.to_vec();
    Ok(Function { n_locals, code })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PackageError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(malformed(self.pos, format!("truncated: need {n} bytes"))),
        }
    }

    fn u8(&mut self) -> Result<u8, PackageError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PackageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), PackageError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(malformed(self.pos, "trailing bytes"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counter() -> IfuncPackage {
        IfuncPackage {
            name: IfuncName::new("counter").unwrap(),
            imports: vec![Import::new("ctr_inc", 0, false)],
            get_max_size: Function { n_locals: 0, code: vec![0x01, 0, 0, 0, 0, 0, 0, 0, 0, 0x51] },
            payload_init: Function { n_locals: 0, code: vec![0x01, 0, 0, 0, 0, 0, 0, 0, 0, 0x51] },
            main: Function { n_locals: 0, code: vec![0x50, 0, 0x51] },
        }
    }

    #[test]
    fn layout() {
        let bytes = serialize_package(&counter());
        assert_eq!(&bytes[..6], b"IFNC\x01\x07");
        assert_eq!(&bytes[6..13], b"counter");
        assert_eq!(&bytes[13..24], b"\x01\x07ctr_inc\x00\x00");
        assert_eq!(parse_package(&bytes).unwrap(), counter());
    }

    #[test]
    fn every_truncation_is_malformed() {
        let bytes = serialize_package(&counter());
        for n in 0..bytes.len() {
            assert!(matches!(parse_package(&bytes[..n]), Err(PackageError::Malformed { .. })), "len {n}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_package(&extra).is_err());
    }

    #[test]
    fn bad_fields() {
        let good = serialize_package(&counter());
        let mut b = good.clone();
        b[0] = b'X';
        assert!(parse_package(&b).is_err());
        let mut b = good.clone();
        b[4] = 2;
        assert!(parse_package(&b).is_err());
        let mut b = good.clone();
        b[22] = 5; // n_args
        assert_eq!(parse_package(&b), Err(malformed(22, "import takes 5 args, limit is 4")));
        let mut b = good.clone();
        b[23] = 2; // has_result
        assert!(parse_package(&b).is_err());
    }

    #[test]
    fn digest_contract() {
        let bytes = serialize_package(&counter());
        assert_eq!(package_digest(&bytes), package_digest(&bytes));
        let mut flipped = bytes.clone();
        flipped[10] ^= 0x20;
        assert_ne!(package_digest(&bytes), package_digest(&flipped));
        assert_eq!(
            hex::encode(package_digest(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    fn any_import() -> impl Strategy<Value = Import> {
        ("[a-z_][a-z0-9_]{0,31}", 0u8..=4, any::<bool>()).prop_map(|(n, a, r)| Import::new(&n, a, r))
    }

    proptest! {
        #[test]
        fn code_unit_round_trip(
            imports in proptest::collection::vec(any_import(), 0..=32),
            n_locals in any::<u8>(),
            code in proptest::collection::vec(any::<u8>(), 0..200),
        ) {
            let unit = CodeUnit { imports, n_locals, code };
            prop_assert_eq!(parse_code_unit(&serialize_code_unit(&unit)).unwrap(), unit);
        }
    }
}
