//! Packages shipped with the crate, as assembler source.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::asm::assemble;
use crate::runtime::PACKAGE_EXT;
use crate::vm::HostTable;

pub const COUNTER: &str = "counter";
pub const XOR: &str = "xor";
pub const XOR_KEY: u8 = 0x5C;

pub const COUNTER_SRC: &str = include_str!("../packages/counter.ifasm");
pub const XOR_SRC: &str = include_str!("../packages/xor.ifasm");

pub const BUILTIN: &[(&str, &str)] = &[(COUNTER, COUNTER_SRC), (XOR, XOR_SRC)];

/// Assembled bytes of a built-in package.
pub fn builtin(name: &str) -> Option<Vec<u8>> {
    let (_, src) = BUILTIN.iter().find(|(n, _)| *n == name)?;
    Some(assemble(src).expect("built-in package assembles"))
}

/// Writes every built-in package into `dir` as `<name>.ifn`.
pub fn install(dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, _) in BUILTIN {
        fs::write(dir.join(format!("{name}.{PACKAGE_EXT}")), builtin(name).unwrap())?;
    }
    Ok(())
}

/// Adds `ctr_inc/0` to `host`, bumping `counter` once per call.
pub fn add_counter(host: &mut HostTable, counter: Arc<AtomicU64>) {
    host.register("ctr_inc", 0, false, move |_| {
        counter.fetch_add(1, Ordering::Relaxed);
        Ok(0)
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::parse_package;

    #[test]
    fn builtins_assemble_under_their_own_names() {
        for (name, _) in BUILTIN {
            let pkg = parse_package(&builtin(name).unwrap()).unwrap();
            assert_eq!(pkg.name.as_str(), *name);
        }
        assert_eq!(builtin("nope"), None);
    }
}
