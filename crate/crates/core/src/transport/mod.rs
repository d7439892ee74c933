//! Emulated one-sided RDMA.
//!
//! A [`RegionTable`] owns registered memory regions, each protected by a
//! random 32-bit rkey. [`Endpoint`]s post ordered, non-blocking puts into
//! those regions and complete them with [`Endpoint::flush`]. Endpoints reach
//! a table either in process ([`RegionTable::connect_loopback`]) or over TCP
//! ([`RegionTable::serve`] and [`Endpoint::connect`]); both paths run the same
//! record handler, so faults and ordering behave identically.

mod endpoint;
mod server;
pub mod wire;

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::sync::atomic::AtomicU8;
use std::sync::{Arc, Mutex, RwLock};

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use thiserror::Error;

use crate::shmem::{self, AtomicBytes};

pub use endpoint::{Endpoint, EndpointState, PutToken};
pub use server::ServerHandle;

/// First virtual base handed out by a table.
pub const BASE_ADDR: u64 = 0x0000_1000_0000_0000;
const PAGE: u64 = 4096;
/// Canary bytes on each side of a backing.
pub const GUARD_LEN: usize = 64;
const GUARD_BYTE: u8 = 0xCC;
pub const MAX_TAG_LEN: usize = 255;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perms(u8);

impl Perms {
    pub const NONE: Perms = Perms(0);
    pub const REMOTE_READ: Perms = Perms(0x01);
    pub const REMOTE_WRITE: Perms = Perms(0x02);
    pub const READ_WRITE: Perms = Perms(0x03);

    pub fn from_bits(bits: u8) -> Self {
        Perms(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, other: Perms) -> bool {
        self.0 & other.0 == other.0
    }
}

impl std::ops::BitOr for Perms {
    type Output = Perms;
    fn bitor(self, rhs: Perms) -> Perms {
        Perms(self.0 | rhs.0)
    }
}

impl fmt::Debug for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = if self.contains(Perms::REMOTE_READ) { "R" } else { "-" };
        let w = if self.contains(Perms::REMOTE_WRITE) { "W" } else { "-" };
        write!(f, "Perms({r}{w})")
    }
}

/// Fault codes reported by a region server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FaultCode {
    BadRkey = 1,
    OutOfBounds = 2,
    NoPerm = 3,
    UnknownRegion = 4,
}

impl FaultCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => FaultCode::BadRkey,
            2 => FaultCode::OutOfBounds,
            3 => FaultCode::NoPerm,
            4 => FaultCode::UnknownRegion,
            _ => return None,
        })
    }
}

/// What a remote peer needs to address a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionInfo {
    pub base: u64,
    pub len: u64,
    pub rkey: u32,
    pub perms: Perms,
}

impl RegionInfo {
    /// Virtual address of `offset` within the region.
    pub fn addr(&self, offset: u64) -> u64 {
        self.base + offset
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("a region tagged {0:?} is already registered")]
    DuplicateTag(String),
    #[error("regions must have non-zero length")]
    ZeroLength,
    #[error("invalid region tag {0:?}")]
    InvalidTag(String),
    #[error("no region tagged {0:?}")]
    UnknownRegion(String),
    #[error("endpoint poisoned: {0}")]
    EndpointPoisoned(EndpointFault),
    #[error("put of {0} bytes exceeds the record limit")]
    PutTooLarge(usize),
    #[error("failed to bind: {0}")]
    BindFailure(#[source] io::Error),
    #[error("connection failed: {0}")]
    Connect(#[source] io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// The error an endpoint is stuck in once poisoned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointFault {
    Remote { code: FaultCode, detail: u64 },
    LinkDown(String),
}

impl EndpointFault {
    pub fn code(&self) -> Option<FaultCode> {
        match self {
            EndpointFault::Remote { code, .. } => Some(*code),
            EndpointFault::LinkDown(_) => None,
        }
    }
}

impl fmt::Display for EndpointFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EndpointFault::Remote { code, detail } => write!(f, "{code:?} (detail {detail:#x})"),
            EndpointFault::LinkDown(why) => write!(f, "link down: {why}"),
        }
    }
}

/// A registered region and its backing memory.
pub struct MemoryRegion {
    tag: String,
    info: RegionInfo,
    // GUARD_LEN canary bytes, the region, GUARD_LEN canary bytes.
    backing: Box<[AtomicU8]>,
    write_lock: Mutex<()>,
}

impl MemoryRegion {
    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn info(&self) -> RegionInfo {
        self.info
    }

    pub fn len(&self) -> usize {
        self.info.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.info.len == 0
    }

    /// The region's bytes, for the local poller.
    pub fn bytes(&self) -> &[AtomicU8] {
        &self.backing[GUARD_LEN..GUARD_LEN + self.len()]
    }

    pub fn snapshot(&self) -> Vec<u8> {
        AtomicBytes::to_vec(self.bytes())
    }

    /// True when no byte outside the region has ever been written.
    pub fn guards_intact(&self) -> bool {
        let n = self.backing.len();
        (0..GUARD_LEN).chain(n - GUARD_LEN..n).all(|i| self.backing.load_byte(i) == GUARD_BYTE)
    }

    /// Applies a validated put. The first byte is published last so that a
    /// reader observing it also observes the rest of the put.
    fn apply(&self, offset: usize, data: &[u8]) {
        let _g = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let bytes = self.bytes();
        if let Some((&first, rest)) = data.split_first() {
            bytes.write_from(offset + 1, rest);
            bytes.store_byte(offset, first);
        }
    }
}

impl fmt::Debug for MemoryRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryRegion").field("tag", &self.tag).field("info", &self.info).finish()
    }
}

#[derive(Default)]
struct Regions {
    by_tag: HashMap<String, Arc<MemoryRegion>>,
    by_rkey: HashMap<u32, Arc<MemoryRegion>>,
    next_base: u64,
}

/// The target-side registry of remotely writable regions.
pub struct RegionTable {
    regions: RwLock<Regions>,
    rng: Mutex<StdRng>,
}

impl RegionTable {
    pub fn new() -> Arc<Self> {
        Arc::new(RegionTable {
            regions: RwLock::new(Regions { next_base: BASE_ADDR, ..Default::default() }),
            rng: Mutex::new(StdRng::from_entropy()),
        })
    }

    pub fn register_region(&self, tag: &str, length: usize, perms: Perms) -> Result<Arc<MemoryRegion>, TransportError> {
        if length == 0 {
            return Err(TransportError::ZeroLength);
        }
        if tag.is_empty() || tag.len() > MAX_TAG_LEN {
            return Err(TransportError::InvalidTag(tag.to_string()));
        }
        let mut regions = self.regions.write().unwrap();
        if regions.by_tag.contains_key(tag) {
            return Err(TransportError::DuplicateTag(tag.to_string()));
        }
        let rkey = {
            let mut rng = self.rng.lock().unwrap();
            loop {
                let k = rng.next_u32();
                if !regions.by_rkey.contains_key(&k) {
                    break k;
                }
            }
        };
        let base = regions.next_base;
        let span = (length as u64).div_ceil(PAGE) * PAGE;
        regions.next_base =
            base.checked_add(span).ok_or_else(|| TransportError::Protocol("virtual address space exhausted".into()))?;

        let backing = shmem::zeroed(length + 2 * GUARD_LEN);
        for i in (0..GUARD_LEN).chain(length + GUARD_LEN..length + 2 * GUARD_LEN) {
            backing.store_byte(i, GUARD_BYTE);
        }
        let region = Arc::new(MemoryRegion {
            tag: tag.to_string(),
            info: RegionInfo { base, len: length as u64, rkey, perms },
            backing,
            write_lock: Mutex::new(()),
        });
        regions.by_tag.insert(tag.to_string(), Arc::clone(&region));
        regions.by_rkey.insert(rkey, Arc::clone(&region));
        Ok(region)
    }

    /// Removes a region. Its rkey stops being accepted immediately; local
    /// holders of the region keep their backing.
    pub fn deregister_region(&self, tag: &str) -> Result<(), TransportError> {
        let mut regions = self.regions.write().unwrap();
        let region = regions.by_tag.remove(tag).ok_or_else(|| TransportError::UnknownRegion(tag.to_string()))?;
        regions.by_rkey.remove(&region.info.rkey);
        Ok(())
    }

    pub fn lookup(&self, tag: &str) -> Option<Arc<MemoryRegion>> {
        self.regions.read().unwrap().by_tag.get(tag).cloned()
    }

    fn by_rkey(&self, rkey: u32) -> Option<Arc<MemoryRegion>> {
        self.regions.read().unwrap().by_rkey.get(&rkey).cloned()
    }

    /// Validates and applies one put, returning the fault on rejection.
    /// Rejected puts modify no bytes.
    pub(crate) fn apply_put(&self, rkey: u32, addr: u64, data: &[u8]) -> Result<(), (FaultCode, u64)> {
        let region = self.by_rkey(rkey).ok_or((FaultCode::BadRkey, rkey as u64))?;
        if !region.info.perms.contains(Perms::REMOTE_WRITE) {
            return Err((FaultCode::NoPerm, rkey as u64));
        }
        let info = region.info;
        let end = addr.checked_add(data.len() as u64);
        match end {
            Some(end) if addr >= info.base && end <= info.base + info.len => {
                region.apply((addr - info.base) as usize, data);
                Ok(())
            }
            _ => Err((FaultCode::OutOfBounds, addr)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn register_contract() {
        let t = RegionTable::new();
        let r = t.register_region("rx", 4096, Perms::REMOTE_WRITE).unwrap();
        assert_eq!(r.info().len, 4096);
        assert_eq!(r.info().base, BASE_ADDR);
        assert!(matches!(t.register_region("rx", 10, Perms::REMOTE_WRITE), Err(TransportError::DuplicateTag(_))));
        assert!(matches!(t.register_region("z", 0, Perms::REMOTE_WRITE), Err(TransportError::ZeroLength)));
        assert!(r.guards_intact());
    }

    #[test]
    fn many_registrations_have_distinct_keys_and_disjoint_ranges() {
        let t = RegionTable::new();
        let mut keys = HashSet::new();
        let mut ranges = Vec::new();
        for i in 0..10_000 {
            let r = t.register_region(&format!("r{i}"), 1 + (i * 37) % 9000, Perms::REMOTE_WRITE).unwrap();
            let info = r.info();
            assert!(keys.insert(info.rkey));
            ranges.push((info.base, info.base + info.len));
        }
        ranges.sort();
        for w in ranges.windows(2) {
            assert!(w[0].1 <= w[1].0);
        }
    }

    #[test]
    fn put_validation_order_and_zero_effect() {
        let t = RegionTable::new();
        let r = t.register_region("rx", 16, Perms::REMOTE_WRITE).unwrap();
        let ro = t.register_region("ro", 16, Perms::REMOTE_READ).unwrap();
        let base = r.info().base;
        assert_eq!(t.apply_put(r.info().rkey ^ 1, base, &[1]), Err((FaultCode::BadRkey, (r.info().rkey ^ 1) as u64)));
        assert_eq!(t.apply_put(ro.info().rkey, ro.info().base, &[1]).unwrap_err().0, FaultCode::NoPerm);
        assert_eq!(t.apply_put(r.info().rkey, base + 15, &[1, 2]).unwrap_err().0, FaultCode::OutOfBounds);
        assert_eq!(t.apply_put(r.info().rkey, base - 1, &[1]).unwrap_err().0, FaultCode::OutOfBounds);
        assert_eq!(t.apply_put(r.info().rkey, u64::MAX, &[1, 2]).unwrap_err().0, FaultCode::OutOfBounds);
        assert_eq!(r.snapshot(), vec![0; 16]);
        t.apply_put(r.info().rkey, base + 14, &[7, 8]).unwrap();
        assert_eq!(&r.snapshot()[14..], &[7, 8]);
        t.apply_put(r.info().rkey, base + 16, &[]).unwrap();
        assert!(r.guards_intact() && ro.guards_intact());
    }

    #[test]
    fn deregistered_key_is_refused() {
        let t = RegionTable::new();
        let r = t.register_region("rx", 8, Perms::REMOTE_WRITE).unwrap();
        t.deregister_region("rx").unwrap();
        assert_eq!(t.apply_put(r.info().rkey, r.info().base, &[1]).unwrap_err().0, FaultCode::BadRkey);
        assert!(matches!(t.deregister_region("rx"), Err(TransportError::UnknownRegion(_))));
    }
}
