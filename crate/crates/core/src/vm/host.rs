use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use log::info;
use thiserror::Error;

use super::interp::Trap;
use super::validate::ValidCodeUnit;
use super::Memory;

/// Arguments and target memory visible to a host function during a call.
pub struct HostCall<'a> {
    /// Popped operands, first argument first.
    pub args: &'a [i64],
    /// The caller's args region.
    pub target: &'a mut dyn Memory,
    pub target_writable: bool,
}

pub type HostFn = Arc<dyn Fn(&mut HostCall<'_>) -> Result<i64, Trap> + Send + Sync>;

#[derive(Clone)]
pub struct HostFunction {
    pub n_args: u8,
    pub has_result: bool,
    pub(crate) f: HostFn,
}

impl HostFunction {
    pub fn call(&self, call: &mut HostCall<'_>) -> Result<i64, Trap> {
        (self.f)(call)
    }
}

impl fmt::Debug for HostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HostFunction")
            .field("n_args", &self.n_args)
            .field("has_result", &self.has_result)
            .finish_non_exhaustive()
    }
}

/// Functions a target process exposes to injected code, by name.
#[derive(Clone, Default, Debug)]
pub struct HostTable {
    fns: HashMap<String, HostFunction>,
}

impl HostTable {
    pub fn empty() -> Self {
        HostTable::default()
    }

    /// A table holding the runtime's standard imports: `log_i64/1` and
    /// `abort/1`.
    pub fn with_std() -> Self {
        let mut t = HostTable::empty();
        t.register("log_i64", 1, false, |c| {
            info!("ifunc log_i64: {}", c.args[0]);
            Ok(0)
        });
        t.register("abort", 1, false, |c| Err(Trap::Abort(c.args[0])));
        t
    }

    pub fn register<F>(&mut self, name: &str, n_args: u8, has_result: bool, f: F) -> &mut Self
    where
        F: Fn(&mut HostCall<'_>) -> Result<i64, Trap> + Send + Sync + 'static,
    {
        self.fns.insert(name.to_string(), HostFunction { n_args, has_result, f: Arc::new(f) });
        self
    }

    pub fn get(&self, name: &str) -> Option<&HostFunction> {
        self.fns.get(name)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("unresolved import {0:?}")]
    Unresolved(String),
    #[error("import {name:?} declared ({want_args} args, result {want_result}) but host provides ({have_args} args, result {have_result})")]
    Signature { name: String, want_args: u8, want_result: bool, have_args: u8, have_result: bool },
}

impl LinkError {
    pub fn name(&self) -> &str {
        match self {
            LinkError::Unresolved(n) => n,
            LinkError::Signature { name, .. } => name,
        }
    }
}

/// A validated code unit with every import resolved.
#[derive(Clone, Debug)]
pub struct BoundFunction {
    pub(crate) unit: ValidCodeUnit,
    pub(crate) table: Arc<[HostFunction]>,
}

impl BoundFunction {
    pub fn unit(&self) -> &ValidCodeUnit {
        &self.unit
    }
}

pub fn bind_imports(unit: &ValidCodeUnit, host: &HostTable) -> Result<BoundFunction, LinkError> {
    let table = unit
        .unit()
        .imports
        .iter()
        .map(|imp| {
            let f = host.get(&imp.name).ok_or_else(|| LinkError::Unresolved(imp.name.clone()))?;
            if f.n_args != imp.n_args || f.has_result != imp.has_result {
                return Err(LinkError::Signature {
                    name: imp.name.clone(),
                    want_args: imp.n_args,
                    want_result: imp.has_result,
                    have_args: f.n_args,
                    have_result: f.has_result,
                });
            }
            Ok(f.clone())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BoundFunction { unit: unit.clone(), table: table.into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::{CALL_IMPORT, RET};
    use crate::vm::{CodeUnit, Import};

    fn unit(imports: Vec<Import>) -> ValidCodeUnit {
        ValidCodeUnit::new(CodeUnit { imports, n_locals: 0, code: vec![CALL_IMPORT, 0, RET] }).unwrap()
    }

    #[test]
    fn binds_and_rejects() {
        let mut host = HostTable::with_std();
        host.register("ctr_inc", 0, false, |_| Ok(0));
        assert!(bind_imports(&unit(vec![Import::new("ctr_inc", 0, false)]), &host).is_ok());
        assert_eq!(
            bind_imports(&unit(vec![Import::new("nope", 0, false)]), &host).unwrap_err(),
            LinkError::Unresolved("nope".into())
        );
        let mut one_arg = HostTable::empty();
        one_arg.register("ctr_inc", 1, false, |_| Ok(0));
        let err = bind_imports(&unit(vec![Import::new("ctr_inc", 0, false)]), &one_arg).unwrap_err();
        assert!(matches!(err, LinkError::Signature { .. }));
        assert_eq!(err.name(), "ctr_inc");
    }
}
