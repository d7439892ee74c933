//! The ifunc runtime: register packages, build and send messages, and poll
//! receive buffers on the target.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::{Duration, Instant};
use std::{fs, io};

use thiserror::Error;

use crate::frame::{
    self, alloc_frame, payload_mut, try_decode_header, CodeCarrier, FrameError, FrameFlags, FrameHeader, HeaderStatus,
    IfuncName, RejectReason, HDR_SIGNAL, HEADER_LEN, TRAILER_SIGNAL,
};
use crate::shmem::{wait_mem, AtomicBytes};
use crate::transport::{Endpoint, PutToken, TransportError};
use crate::vm::{
    bind_imports, exec_function, package_digest, parse_code_unit, parse_package, serialize_code_unit, ArgsAccess,
    BoundFunction, ByteMem, Entry, HostTable, IfuncPackage, Invalid, LinkError, Memory, PackageError, SharedMem, Trap,
    ValidCodeUnit, VmLimits,
};

/// Environment variable naming the directory that holds `<name>.ifn` files.
pub const LIB_DIR_ENV: &str = "IFUNC_LIB_DIR";
pub const DEFAULT_POLL_TIMEOUT: Duration = Duration::from_secs(5);
pub const PACKAGE_EXT: &str = "ifn";
/// Largest payload a message may carry.
pub const MAX_PAYLOAD: u64 = (1 << 32) - 66;

/// Whether the target will run code shipped inside a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CarrierMode {
    /// Frames carry the package digest; the target runs its own copy of the
    /// package and refuses frames that do not match it.
    #[default]
    RequireLocalPackage,
    /// Frames carry the code unit itself, and the target runs it without a
    /// local package.
    TrustInlineCode,
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub lib_dir: PathBuf,
    pub mode: CarrierMode,
    pub poll_timeout: Duration,
    pub limits: VmLimits,
}

impl RuntimeConfig {
    pub fn new(lib_dir: impl Into<PathBuf>) -> Self {
        RuntimeConfig {
            lib_dir: lib_dir.into(),
            mode: CarrierMode::default(),
            poll_timeout: DEFAULT_POLL_TIMEOUT,
            limits: VmLimits::default(),
        }
    }

    /// Reads the package directory from `IFUNC_LIB_DIR`.
    pub fn from_env() -> Result<Self, RuntimeError> {
        let dir = std::env::var_os(LIB_DIR_ENV).ok_or(RuntimeError::LibDirUnset)?;
        Ok(RuntimeConfig::new(dir))
    }

    pub fn mode(mut self, mode: CarrierMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn poll_timeout(mut self, timeout: Duration) -> Self {
        self.poll_timeout = timeout;
        self
    }

    pub fn limits(mut self, limits: VmLimits) -> Self {
        self.limits = limits;
        self
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("{LIB_DIR_ENV} is not set")]
    LibDirUnset,
    #[error(transparent)]
    InvalidName(#[from] FrameError),
    #[error("package not found: {}", .0.display())]
    PackageNotFound(PathBuf),
    #[error("reading {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    MalformedPackage(#[from] PackageError),
    #[error("{} failed validation: {}", .0.name(), .1)]
    ValidationFailed(Entry, Invalid),
    #[error("package declares name {found:?}, expected {requested:?}")]
    NameMismatch { requested: String, found: String },
    #[error("handle is not registered")]
    UnknownHandle,
    #[error("message is not live")]
    UnknownMessage,
    #[error(transparent)]
    LinkFailed(#[from] LinkError),
    #[error("get_max_size trapped: {0}")]
    GetSizeTrap(Trap),
    #[error("{} returned no value", .0.name())]
    MissingResult(Entry),
    #[error("get_max_size returned {0}")]
    BadPayloadSize(i64),
    #[error("payload_init trapped: {0}")]
    InitTrap(Trap),
    #[error("payload_init returned status {0}")]
    InitRejected(i64),
    #[error("frame of {0} bytes is too large")]
    FrameTooLarge(u64),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Result of one poll attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PollStatus {
    Executed,
    NoMessage,
    Rejected(RejectReason),
    /// The header arrived but the trailer did not within the poll timeout.
    /// The frame is left in place for a later poll.
    Timeout,
    ExecTrap(Trap),
    LinkFailed(String),
    AutoRegFailed(String),
}

type SourcePair = (BoundFunction, BoundFunction);

struct Registered {
    name: IfuncName,
    package: IfuncPackage,
    digest: [u8; 32],
    units: [ValidCodeUnit; 3],
    inline_code: Vec<u8>,
    source: OnceLock<Result<SourcePair, LinkError>>,
    main: OnceLock<Result<BoundFunction, LinkError>>,
}

impl Registered {
    fn unit(&self, e: Entry) -> &ValidCodeUnit {
        match e {
            Entry::GetMaxSize => &self.units[0],
            Entry::PayloadInit => &self.units[1],
            Entry::Main => &self.units[2],
        }
    }

    fn bound_source(&self, host: &HostTable) -> Result<&SourcePair, LinkError> {
        self.source
            .get_or_init(|| {
                Ok((
                    bind_imports(self.unit(Entry::GetMaxSize), host)?,
                    bind_imports(self.unit(Entry::PayloadInit), host)?,
                ))
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    fn bound_main(&self, host: &HostTable) -> Result<&BoundFunction, LinkError> {
        self.main.get_or_init(|| bind_imports(self.unit(Entry::Main), host)).as_ref().map_err(Clone::clone)
    }
}

/// A registered ifunc. Valid until deregistered.
#[derive(Clone)]
pub struct IfuncHandle {
    entry: Arc<Registered>,
}

impl IfuncHandle {
    pub fn name(&self) -> &IfuncName {
        &self.entry.name
    }

    pub fn package(&self) -> &IfuncPackage {
        &self.entry.package
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.entry.digest
    }

    /// The code section an inline frame of this ifunc carries.
    pub fn inline_code(&self) -> &[u8] {
        &self.entry.inline_code
    }
}

impl std::fmt::Debug for IfuncHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IfuncHandle").field("name", &self.entry.name).finish()
    }
}

/// A ready-to-send frame.
#[derive(Debug, Clone)]
pub struct IfuncMessage {
    name: IfuncName,
    seq: u64,
    frame: Vec<u8>,
}

impl IfuncMessage {
    pub fn name(&self) -> &IfuncName {
        &self.name
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn frame(&self) -> &[u8] {
        &self.frame
    }

    pub fn frame_size(&self) -> usize {
        self.frame.len()
    }

    pub fn header(&self) -> FrameHeader {
        match try_decode_header(&self.frame, self.frame.len()) {
            HeaderStatus::Header(h) => h,
            other => unreachable!("message frame does not decode: {other:?}"),
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.frame[self.header().payload_range()]
    }
}

/// Source args are read-only; stores through this view are dropped.
struct ReadOnlyMem<'a>(&'a [u8]);

impl Memory for ReadOnlyMem<'_> {
    fn size(&self) -> usize {
        self.0.len()
    }
    fn load(&self, at: usize) -> u8 {
        self.0[at]
    }
    fn store(&mut self, _at: usize, _v: u8) {}
}

pub struct RuntimeContext {
    config: RuntimeConfig,
    host: HostTable,
    registry: RwLock<HashMap<IfuncName, Arc<Registered>>>,
    inline_cache: RwLock<HashMap<[u8; 32], Arc<BoundFunction>>>,
    load_counts: Mutex<HashMap<IfuncName, u64>>,
    live: Mutex<HashSet<u64>>,
    next_seq: AtomicU64,
}

impl RuntimeContext {
    pub fn new(config: RuntimeConfig, host: HostTable) -> Self {
        RuntimeContext {
            config,
            host,
            registry: RwLock::new(HashMap::new()),
            inline_cache: RwLock::new(HashMap::new()),
            load_counts: Mutex::new(HashMap::new()),
            live: Mutex::new(HashSet::new()),
            next_seq: AtomicU64::new(1),
        }
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn lib_dir(&self) -> &Path {
        &self.config.lib_dir
    }

    /// Number of times the package for `name` has been read from disk.
    pub fn load_count(&self, name: &str) -> u64 {
        let Ok(name) = IfuncName::new(name) else { return 0 };
        self.load_counts.lock().unwrap().get(&name).copied().unwrap_or(0)
    }

    /// Loads `<lib_dir>/<name>.ifn`. Registering an already registered name
    /// returns the existing entry without touching the disk.
    pub fn register_ifunc(&self, name: &str) -> Result<IfuncHandle, RuntimeError> {
        let name = IfuncName::new(name)?;
        if let Some(entry) = self.registry.read().unwrap().get(&name) {
            return Ok(IfuncHandle { entry: Arc::clone(entry) });
        }
        let mut registry = self.registry.write().unwrap();
        if let Some(entry) = registry.get(&name) {
            return Ok(IfuncHandle { entry: Arc::clone(entry) });
        }
        let entry = Arc::new(self.load(&name)?);
        registry.insert(name, Arc::clone(&entry));
        Ok(IfuncHandle { entry })
    }

    fn load(&self, name: &IfuncName) -> Result<Registered, RuntimeError> {
        let path = self.config.lib_dir.join(format!("{name}.{PACKAGE_EXT}"));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(RuntimeError::PackageNotFound(path)),
            Err(source) => return Err(RuntimeError::Io { path, source }),
        };
        *self.load_counts.lock().unwrap().entry(name.clone()).or_insert(0) += 1;
        let package = parse_package(&bytes)?;
        if &package.name != name {
            return Err(RuntimeError::NameMismatch { requested: name.to_string(), found: package.name.to_string() });
        }
        let validate =
            |e: Entry| ValidCodeUnit::new(package.code_unit(e)).map_err(|err| RuntimeError::ValidationFailed(e, err));
        let units = [validate(Entry::GetMaxSize)?, validate(Entry::PayloadInit)?, validate(Entry::Main)?];
        let inline_code = serialize_code_unit(&package.code_unit(Entry::Main));
        Ok(Registered {
            name: name.clone(),
            digest: package_digest(&bytes),
            package,
            units,
            inline_code,
            source: OnceLock::new(),
            main: OnceLock::new(),
        })
    }

    fn is_current(&self, handle: &IfuncHandle) -> bool {
        self.registry.read().unwrap().get(&handle.entry.name).is_some_and(|e| Arc::ptr_eq(e, &handle.entry))
    }

    /// Drops the registry entry and its caches. Messages already created
    /// stay usable.
    pub fn deregister_ifunc(&self, handle: &IfuncHandle) -> Result<(), RuntimeError> {
        let mut registry = self.registry.write().unwrap();
        match registry.get(&handle.entry.name) {
            Some(e) if Arc::ptr_eq(e, &handle.entry) => {
                registry.remove(&handle.entry.name);
                Ok(())
            }
            _ => Err(RuntimeError::UnknownHandle),
        }
    }

    /// Builds a message: sizes the payload with `get_max_size`, allocates the
    /// frame once, and lets `payload_init` fill the payload in place.
    pub fn msg_create(&self, handle: &IfuncHandle, source_args: &[u8]) -> Result<IfuncMessage, RuntimeError> {
        if !self.is_current(handle) {
            return Err(RuntimeError::UnknownHandle);
        }
        let entry = &handle.entry;
        let (get_size, init) = entry.bound_source(&self.host)?;
        let limits = &self.config.limits;

        let run =
            exec_function(get_size, &mut ByteMem(&mut []), &mut ReadOnlyMem(source_args), ArgsAccess::ReadOnly, limits);
        let size =
            run.outcome.map_err(RuntimeError::GetSizeTrap)?.ok_or(RuntimeError::MissingResult(Entry::GetMaxSize))?;
        if size < 0 {
            return Err(RuntimeError::BadPayloadSize(size));
        }
        if size as u64 > MAX_PAYLOAD {
            return Err(RuntimeError::FrameTooLarge(size as u64));
        }

        let (flags, code) = match self.config.mode {
            CarrierMode::TrustInlineCode => (FrameFlags::new(CodeCarrier::Inline), &entry.inline_code[..]),
            CarrierMode::RequireLocalPackage => (FrameFlags::new(CodeCarrier::Digest), &entry.digest[..]),
        };
        let seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
        let mut frame = alloc_frame(&entry.name, flags, code, size as usize, seq).map_err(|e| match e {
            FrameError::TooLarge(n) => RuntimeError::FrameTooLarge(n),
            other => RuntimeError::InvalidName(other),
        })?;

        let run = exec_function(
            init,
            &mut ByteMem(payload_mut(&mut frame)),
            &mut ReadOnlyMem(source_args),
            ArgsAccess::ReadOnly,
            limits,
        );
        let status =
            run.outcome.map_err(RuntimeError::InitTrap)?.ok_or(RuntimeError::MissingResult(Entry::PayloadInit))?;
        if status != 0 {
            return Err(RuntimeError::InitRejected(status));
        }
        self.live.lock().unwrap().insert(seq);
        Ok(IfuncMessage { name: entry.name.clone(), seq, frame })
    }

    pub fn msg_free(&self, msg: IfuncMessage) -> Result<(), RuntimeError> {
        if self.live.lock().unwrap().remove(&msg.seq) {
            Ok(())
        } else {
            Err(RuntimeError::UnknownMessage)
        }
    }

    /// Checks `buffer` for one frame and, if a complete valid one is there,
    /// runs it and clears its signals. Executes at most one frame per call.
    pub fn poll_ifunc(&self, buffer: &[AtomicU8], target_args: &mut dyn Memory) -> PollStatus {
        if buffer.is_empty() || buffer.load_byte(0) != HDR_SIGNAL {
            return PollStatus::NoMessage;
        }
        if buffer.len() < HEADER_LEN {
            buffer.store_byte(0, 0);
            return PollStatus::Rejected(RejectReason::TooLong);
        }
        let mut raw = [0u8; HEADER_LEN];
        buffer.read_into(0, &mut raw);
        let header = match try_decode_header(&raw, buffer.len()) {
            HeaderStatus::NoMessage => return PollStatus::NoMessage,
            HeaderStatus::Rejected(reason) => {
                buffer.store_byte(0, 0);
                return PollStatus::Rejected(reason);
            }
            HeaderStatus::Header(h) => h,
        };

        let trailer = header.trailer_offset();
        let deadline = Instant::now() + self.config.poll_timeout;
        loop {
            let seen = buffer.load_byte(trailer);
            if seen == TRAILER_SIGNAL {
                break;
            }
            if wait_mem(buffer, trailer, seen, Some(deadline)).is_err() {
                return PollStatus::Timeout;
            }
        }

        let mut code = vec![0u8; header.code_size as usize];
        buffer.read_into(HEADER_LEN, &mut code);
        let status = match self.resolve(&header, &code) {
            Ok(bound) => {
                let payload = &buffer[header.payload_range()];
                let run = exec_function(
                    &bound,
                    &mut SharedMem(payload),
                    target_args,
                    ArgsAccess::ReadWrite,
                    &self.config.limits,
                );
                match run.outcome {
                    Ok(_) => PollStatus::Executed,
                    Err(trap) => PollStatus::ExecTrap(trap),
                }
            }
            Err(status) => status,
        };
        frame::clear_consumed(buffer, &header);
        status
    }

    fn resolve(&self, header: &FrameHeader, code: &[u8]) -> Result<Arc<BoundFunction>, PollStatus> {
        let inline = header.flags.carrier() == CodeCarrier::Inline;
        if inline && self.config.mode == CarrierMode::TrustInlineCode {
            return self.resolve_inline(code);
        }
        let handle = self.register_ifunc(header.name.as_str()).map_err(|e| PollStatus::AutoRegFailed(e.to_string()))?;
        let matches = if inline { code == handle.entry.inline_code } else { code == handle.entry.digest };
        if !matches {
            return Err(PollStatus::Rejected(RejectReason::DigestMismatch));
        }
        handle
            .entry
            .bound_main(&self.host)
            .map(|b| Arc::new(b.clone()))
            .map_err(|e| PollStatus::LinkFailed(e.name().to_string()))
    }

    fn resolve_inline(&self, code: &[u8]) -> Result<Arc<BoundFunction>, PollStatus> {
        let key = package_digest(code);
        if let Some(b) = self.inline_cache.read().unwrap().get(&key) {
            return Ok(Arc::clone(b));
        }
        let unit = parse_code_unit(code).map_err(|_| PollStatus::Rejected(RejectReason::BadCode))?;
        let unit = ValidCodeUnit::new(unit).map_err(|_| PollStatus::Rejected(RejectReason::BadCode))?;
        let bound = bind_imports(&unit, &self.host).map_err(|e| PollStatus::LinkFailed(e.name().to_string()))?;
        let bound = Arc::new(bound);
        self.inline_cache.write().unwrap().insert(key, Arc::clone(&bound));
        Ok(bound)
    }
}

/// Posts the whole frame as a single non-blocking put.
pub fn msg_send_nbix(
    ep: &mut Endpoint,
    msg: &IfuncMessage,
    remote_addr: u64,
    rkey: u32,
) -> Result<PutToken, RuntimeError> {
    Ok(ep.put_nbi(&msg.frame, remote_addr, rkey)?)
}
