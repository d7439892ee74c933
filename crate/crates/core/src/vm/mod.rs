//! A small deterministic stack machine used to carry ifunc code.
//!
//! Code units name the host functions they call in an import table. Before a
//! unit runs, [`bind_imports`] resolves every import against a [`HostTable`],
//! producing a [`BoundFunction`] whose resolved table plays the role a GOT
//! plays for native code. Execution is metered by fuel and confined to two
//! byte regions: the payload and the caller's args.

mod host;
mod interp;
pub mod isa;
mod package;
mod validate;

use std::sync::atomic::AtomicU8;

use crate::shmem::AtomicBytes;

pub use host::{bind_imports, BoundFunction, HostCall, HostFn, HostFunction, HostTable, LinkError};
pub use interp::{exec_function, ArgsAccess, Execution, Trap, VmLimits, DEFAULT_FUEL, DEFAULT_MAX_STACK};
pub use package::{
    package_digest, parse_code_unit, parse_package, serialize_code_unit, serialize_package, CodeUnit, Entry, Function,
    IfuncPackage, Import, PackageError, MAX_IMPORTS, MAX_IMPORT_ARGS, MAX_IMPORT_NAME, PACKAGE_MAGIC,
};
pub use validate::{validate_code_unit, Invalid, InvalidReason, ValidCodeUnit};

/// A byte region the VM can address.
pub trait Memory {
    fn size(&self) -> usize;
    fn load(&self, at: usize) -> u8;
    fn store(&mut self, at: usize, v: u8);
}

/// A plain mutable byte slice.
pub struct ByteMem<'a>(pub &'a mut [u8]);

impl Memory for ByteMem<'_> {
    fn size(&self) -> usize {
        self.0.len()
    }
    fn load(&self, at: usize) -> u8 {
        self.0[at]
    }
    fn store(&mut self, at: usize, v: u8) {
        self.0[at] = v;
    }
}

impl Memory for Vec<u8> {
    fn size(&self) -> usize {
        self.len()
    }
    fn load(&self, at: usize) -> u8 {
        self[at]
    }
    fn store(&mut self, at: usize, v: u8) {
        self[at] = v;
    }
}

/// A view of remotely written memory, such as a payload inside a receive
/// buffer.
pub struct SharedMem<'a>(pub &'a [AtomicU8]);

impl Memory for SharedMem<'_> {
    fn size(&self) -> usize {
        self.0.len()
    }
    fn load(&self, at: usize) -> u8 {
        self.0.load_byte(at)
    }
    fn store(&mut self, at: usize, v: u8) {
        self.0.store_byte(at, v)
    }
}
