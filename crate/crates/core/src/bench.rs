//! Ping-pong latency and batched throughput harnesses for both runtimes.
//!
//! Each side owns a region table with an `rx` buffer for incoming frames and a
//! small `ctl` region. The source drives the target through session
//! descriptors it puts into the target's `ctl`; the target answers with acks,
//! round notifications, and demo results put into the source's regions. The
//! same protocol runs over TCP and over in-process loopback, where the target
//! is a thread.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::am::AM_TRAILER;
use crate::am::{encode_am_frame, AmHandlerTable, AmPollStatus};
use crate::frame::TRAILER_SIGNAL;
use crate::packages::{add_counter, COUNTER, XOR};
use crate::runtime::{CarrierMode, PollStatus, RuntimeConfig, RuntimeContext, RuntimeError};
use crate::shmem::{wait_mem, AtomicBytes};
use crate::transport::{Endpoint, MemoryRegion, Perms, RegionInfo, RegionTable, ServerHandle, TransportError};
use crate::vm::{HostTable, Memory};

pub const RX_TAG: &str = "rx";
pub const CTL_TAG: &str = "ctl";
pub const AM_COUNTER_ID: u16 = 1;
pub const DEFAULT_RX_LEN: usize = 64 << 20;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// Largest input the XOR demo sends in one message.
pub const DEMO_MAX_INPUT: usize = 64 << 10;

const TARGET_CTL_LEN: usize = 256;
const SOURCE_CTL_LEN: usize = 64;
const DESC_SIGNAL: u8 = 0xD5;
const MAX_ADDR_LEN: usize = TARGET_CTL_LEN - 40;
const REJECT_BIT: u64 = 1 << 63;

// Source ctl layout: round notification, ready ack, then the done ack
// followed by the executed-frame count and the counter increment.
const OFF_ROUND: usize = 0;
const OFF_READY: usize = 8;
const OFF_DONE: usize = 16;
const OFF_EXECUTED: usize = 24;
const OFF_COUNTER: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BenchMode {
    Am,
    Ifunc,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Am => "am",
            BenchMode::Ifunc => "ifunc",
        }
    }

    fn code(self) -> u8 {
        match self {
            BenchMode::Ifunc => 0,
            BenchMode::Am => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(BenchMode::Ifunc),
            1 => Some(BenchMode::Am),
            _ => None,
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ifunc" => Ok(BenchMode::Ifunc),
            "am" => Ok(BenchMode::Am),
            _ => Err(format!("unknown mode {s:?} (expected ifunc or am)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Link {
    Loopback,
    Tcp(String),
}

/// Powers of two from 1 B to 1 MiB.
pub fn default_sizes() -> Vec<usize> {
    (0..=20).map(|i| 1usize << i).collect()
}

/// Parses `lo..hi` (powers of two between the bounds, both included) or a
/// comma-separated list.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad size {t:?}: {e}"));
    let sizes = if let Some((lo, hi)) = s.split_once("..") {
        let (lo, hi) = (num(lo)?, num(hi)?);
        if lo == 0 || lo > hi {
            return Err(format!("bad size range {s:?}"));
        }
        let mut v = Vec::new();
        let mut n = lo;
        while n <= hi {
            v.push(n);
            match n.checked_mul(2) {
                Some(m) => n = m,
                None => break,
            }
        }
        v
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if sizes.is_empty() {
        return Err("no sizes".into());
    }
    Ok(sizes)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub link: Link,
    pub sizes: Vec<usize>,
    /// Measured iterations per size: round trips for latency, rounds of
    /// `batch` messages for throughput.
    pub iterations: u32,
    pub warmup: u32,
    pub batch: u32,
    /// Carrier used by the source's runtime.
    pub carrier: CarrierMode,
    /// Carrier policy of the loopback target.
    pub target_carrier: CarrierMode,
    pub lib_dir: PathBuf,
    /// Package directory of the loopback target; defaults to `lib_dir`.
    pub target_lib_dir: Option<PathBuf>,
    pub rx_len: usize,
    pub timeout: Duration,
    pub out: Option<PathBuf>,
}

impl BenchConfig {
    pub fn new(mode: BenchMode, link: Link, lib_dir: impl Into<PathBuf>) -> Self {
        BenchConfig {
            mode,
            link,
            sizes: default_sizes(),
            iterations: 10_000,
            warmup: 100,
            batch: 64,
            carrier: CarrierMode::RequireLocalPackage,
            target_carrier: CarrierMode::RequireLocalPackage,
            lib_dir: lib_dir.into(),
            target_lib_dir: None,
            rx_len: DEFAULT_RX_LEN,
            timeout: DEFAULT_TIMEOUT,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.iterations == 0 {
            return Err(BenchError::Config("iterations must be positive".into()));
        }
        if self.batch == 0 {
            return Err(BenchError::Config("batch must be positive".into()));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(BenchError::Config("sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("poll failed: {0}")]
    Poll(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("target rejected session: {0}")]
    Rejected(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{sent} messages sent but {executed} executed")]
    Conservation { sent: u64, executed: u64 },
    #[error("xor demo output differs from input ({0} bytes)")]
    DemoMismatch(usize),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mode: BenchMode,
    pub payload_size: usize,
    pub frame_size: usize,
    /// Messages timed (warmup excluded).
    pub iterations: u64,
    pub min_ns: u64,
    pub median_ns: u64,
    pub p99_ns: u64,
    pub msgs_per_sec: f64,
    /// Messages put into the target's buffer, warmup included.
    pub sent: u64,
    /// Messages the target reports having executed.
    pub executed: u64,
}

pub const CSV_HEADER: [&str; 8] =
    ["mode", "payload_size", "frame_size", "iterations", "min_ns", "median_ns", "p99_ns", "msgs_per_sec"];

/// Writes a header row and one row per record, ordered by mode then size.
pub fn write_csv(records: &[BenchRecord], path: &Path) -> Result<(), BenchError> {
    let mut sorted: Vec<&BenchRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.mode.as_str(), r.payload_size));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in sorted {
        w.write_record([
            r.mode.as_str().to_string(),
            r.payload_size.to_string(),
            r.frame_size.to_string(),
            r.iterations.to_string(),
            r.min_ns.to_string(),
            r.median_ns.to_string(),
            r.p99_ns.to_string(),
            format!("{:.1}", r.msgs_per_sec),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Minimum, lower median, and nearest-rank 99th percentile.
pub fn summarize(samples: &mut [u64]) -> (u64, u64, u64) {
    assert!(!samples.is_empty());
    samples.sort_unstable();
    let n = samples.len();
    let p99 = (n * 99).div_ceil(100).max(1) - 1;
    (samples[0], samples[(n - 1) / 2], samples[p99])
}

fn nanos(d: Duration) -> u64 {
    d.as_nanos().min(u64::MAX as u128) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Latency = 1,
    Throughput = 2,
    Xor = 3,
    Bye = 4,
}

impl Kind {
    fn from_u8(v: u8) -> Option<Kind> {
        Some(match v {
            1 => Kind::Latency,
            2 => Kind::Throughput,
            3 => Kind::Xor,
            4 => Kind::Bye,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Descriptor {
    kind: Kind,
    mode: BenchMode,
    seq: u32,
    payload_size: u64,
    frame_size: u64,
    /// Round trips for latency, rounds for throughput.
    count: u64,
    batch: u32,
    /// Where the target reaches the source; empty on loopback.
    addr: String,
}

impl Descriptor {
    fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; 38 + self.addr.len()];
        b[0] = DESC_SIGNAL;
        b[1] = self.kind as u8;
        b[2] = self.mode.code();
        b[4..8].copy_from_slice(&self.seq.to_le_bytes());
        b[8..16].copy_from_slice(&self.payload_size.to_le_bytes());
        b[16..24].copy_from_slice(&self.frame_size.to_le_bytes());
        b[24..32].copy_from_slice(&self.count.to_le_bytes());
        b[32..36].copy_from_slice(&self.batch.to_le_bytes());
        b[36..38].copy_from_slice(&(self.addr.len() as u16).to_le_bytes());
        b[38..].copy_from_slice(self.addr.as_bytes());
        b
    }

    fn decode(b: &[u8]) -> Result<Descriptor, String> {
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let kind = Kind::from_u8(b[1]).ok_or_else(|| format!("unknown session kind {}", b[1]))?;
        let mode = BenchMode::from_code(b[2]).ok_or_else(|| format!("unknown mode {}", b[2]))?;
        let addr_len = u16::from_le_bytes([b[36], b[37]]) as usize;
        if addr_len > MAX_ADDR_LEN {
            return Err("address too long".into());
        }
        let addr = String::from_utf8(b[38..38 + addr_len].to_vec()).map_err(|_| "address not utf-8")?;
        Ok(Descriptor {
            kind,
            mode,
            seq: u32::from_le_bytes(b[4..8].try_into().unwrap()),
            payload_size: u64_at(8),
            frame_size: u64_at(16),
            count: u64_at(24),
            batch: u32::from_le_bytes(b[32..36].try_into().unwrap()),
            addr,
        })
    }
}

fn read_u64(region: &[AtomicU8], at: usize) -> u64 {
    let mut b = [0u8; 8];
    region.read_into(at, &mut b);
    u64::from_le_bytes(b)
}

/// Waits for the byte at `at` to differ from `snapshot`.
fn wait_change(
    region: &[AtomicU8],
    at: usize,
    snapshot: u8,
    deadline: Instant,
    what: &'static str,
) -> Result<(), BenchError> {
    wait_mem(region, at, snapshot, Some(deadline)).map_err(|_| BenchError::Timeout(what))
}

/// Waits until the byte at `at` equals `want`.
fn wait_value(
    region: &[AtomicU8],
    at: usize,
    want: u8,
    deadline: Option<Instant>,
    what: &'static str,
) -> Result<(), BenchError> {
    loop {
        let seen = region.load_byte(at);
        if seen == want {
            return Ok(());
        }
        wait_mem(region, at, seen, deadline).map_err(|_| BenchError::Timeout(what))?;
    }
}

/// One process's receive side: regions plus the poller that runs frames.
struct Local {
    table: Arc<RegionTable>,
    rx: Arc<MemoryRegion>,
    ctl: Arc<MemoryRegion>,
    poller: Poller,
    /// Frames this side has executed.
    executed: AtomicU64,
    /// Bumped by the counter ifunc and the AM counter handler.
    counter: Arc<AtomicU64>,
}

enum Poller {
    Ifunc(Box<RuntimeContext>),
    Am(AmHandlerTable),
}

impl Local {
    fn new(
        mode: BenchMode,
        carrier: CarrierMode,
        lib_dir: &Path,
        rx_len: usize,
        ctl_len: usize,
    ) -> Result<Local, BenchError> {
        let table = RegionTable::new();
        let rx = table.register_region(RX_TAG, rx_len, Perms::REMOTE_WRITE)?;
        let ctl = table.register_region(CTL_TAG, ctl_len, Perms::REMOTE_WRITE)?;
        let counter = Arc::new(AtomicU64::new(0));
        let poller = match mode {
            BenchMode::Ifunc => {
                let mut host = HostTable::with_std();
                add_counter(&mut host, Arc::clone(&counter));
                Poller::Ifunc(Box::new(RuntimeContext::new(RuntimeConfig::new(lib_dir).mode(carrier), host)))
            }
            BenchMode::Am => {
                let mut t = AmHandlerTable::new();
                let n = Arc::clone(&counter);
                t.am_register(AM_COUNTER_ID, move |_, _| {
                    n.fetch_add(1, Ordering::Relaxed);
                })
                .expect("fresh table");
                t.seal();
                Poller::Am(t)
            }
        };
        Ok(Local { table, rx, ctl, poller, executed: AtomicU64::new(0), counter })
    }

    fn mode(&self) -> BenchMode {
        match self.poller {
            Poller::Ifunc(_) => BenchMode::Ifunc,
            Poller::Am(_) => BenchMode::Am,
        }
    }

    fn poll(&self, buf: &[AtomicU8], args: &mut dyn Memory) -> Result<bool, BenchError> {
        let ran = match &self.poller {
            Poller::Ifunc(rt) => match rt.poll_ifunc(buf, args) {
                PollStatus::Executed => Ok(true),
                PollStatus::NoMessage => Ok(false),
                other => Err(BenchError::Poll(format!("{other:?}"))),
            },
            Poller::Am(t) => match t.am_poll(buf, args) {
                AmPollStatus::Executed => Ok(true),
                AmPollStatus::NoMessage => Ok(false),
                other => Err(BenchError::Poll(format!("{other:?}"))),
            },
        }?;
        if ran {
            self.executed.fetch_add(1, Ordering::Relaxed);
        }
        Ok(ran)
    }

    /// Polls the frame slot at `at` until one frame executes.
    fn run_one(&self, at: usize, args: &mut dyn Memory, deadline: Instant) -> Result<(), BenchError> {
        let buf = &self.rx.bytes()[at..];
        loop {
            if self.poll(buf, args)? {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(BenchError::Timeout("message"));
            }
            if buf.load_byte(0) == 0 {
                let _ = wait_mem(buf, 0, 0, Some(deadline));
            } else {
                thread::yield_now();
            }
        }
    }
}

/// A connection to the other side's regions.
struct Peer {
    ep: Endpoint,
    rx: RegionInfo,
    ctl: RegionInfo,
}

impl Peer {
    fn open(mut ep: Endpoint) -> Result<Peer, TransportError> {
        let rx = ep.query_region(RX_TAG)?;
        let ctl = ep.query_region(CTL_TAG)?;
        Ok(Peer { ep, rx, ctl })
    }

    fn put_flush(&mut self, data: &[u8], addr: u64, rkey: u32) -> Result<(), TransportError> {
        self.ep.put_nbi(data, addr, rkey)?;
        self.ep.flush()
    }

    fn put_ctl(&mut self, offset: u64, data: &[u8]) -> Result<(), TransportError> {
        let (addr, rkey) = (self.ctl.addr(offset), self.ctl.rkey);
        self.put_flush(data, addr, rkey)
    }
}

/// The target role: answers sessions put into its `ctl` region.
pub struct Target {
    local: Local,
    peer: Option<(String, Peer)>,
    round: u64,
    timeout: Duration,
}

impl Target {
    pub fn new(mode: BenchMode, carrier: CarrierMode, lib_dir: &Path, rx_len: usize) -> Result<Target, BenchError> {
        Ok(Target {
            local: Local::new(mode, carrier, lib_dir, rx_len, TARGET_CTL_LEN)?,
            peer: None,
            round: 0,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn regions(&self) -> &Arc<RegionTable> {
        &self.local.table
    }

    /// Frames executed so far.
    pub fn executed(&self) -> u64 {
        self.local.executed.load(Ordering::Relaxed)
    }

    /// Current value of the target's counter.
    pub fn counter(&self) -> u64 {
        self.local.counter.load(Ordering::Relaxed)
    }

    /// Starts the region server. Call [`Target::run`] afterwards.
    pub fn listen(&self, addr: &str) -> Result<ServerHandle, BenchError> {
        Ok(self.local.table.serve(addr)?)
    }

    /// Handles sessions until a source says goodbye (`once`) or forever.
    pub fn run(&mut self, once: bool) -> Result<(), BenchError> {
        loop {
            let ctl = self.local.ctl.bytes();
            wait_value(ctl, 0, DESC_SIGNAL, None, "session")?;
            let mut raw = [0u8; TARGET_CTL_LEN];
            ctl.read_into(0, &mut raw);
            ctl.store_byte(0, 0);
            let desc = match Descriptor::decode(&raw) {
                Ok(d) => d,
                Err(e) => {
                    warn!("ignoring malformed session descriptor: {e}");
                    continue;
                }
            };
            debug!("session {:?}", desc);
            if desc.kind == Kind::Bye {
                if !desc.addr.is_empty() {
                    self.peer = None;
                    self.round = 0;
                }
                if once {
                    return Ok(());
                }
                continue;
            }
            if let Err(e) = self.session(&desc) {
                warn!("session {} failed: {e}", desc.seq);
            }
        }
    }

    fn connect_back(&mut self, addr: &str) -> Result<&mut Peer, BenchError> {
        if !addr.is_empty() && self.peer.as_ref().is_none_or(|(a, _)| a != addr) {
            info!("connecting back to source at {addr}");
            self.peer = Some((addr.to_string(), Peer::open(Endpoint::connect(addr)?)?));
            self.round = 0;
        }
        self.peer.as_mut().map(|(_, p)| p).ok_or_else(|| BenchError::Protocol("no route to source".into()))
    }

    fn check(&self, d: &Descriptor) -> Result<(), String> {
        if d.mode != self.local.mode() {
            return Err(format!("target serves {} but session wants {}", self.local.mode(), d.mode));
        }
        let need = match d.kind {
            Kind::Throughput => d.frame_size.saturating_mul(d.batch as u64),
            _ => d.frame_size,
        };
        if need > self.local.rx.len() as u64 {
            return Err(format!("{need} bytes do not fit the {} byte receive buffer", self.local.rx.len()));
        }
        if d.kind == Kind::Xor && d.mode != BenchMode::Ifunc {
            return Err("xor demo needs ifunc mode".into());
        }
        Ok(())
    }

    fn session(&mut self, d: &Descriptor) -> Result<(), BenchError> {
        let verdict = self.check(d);
        let peer = self.connect_back(&d.addr)?;
        let ready = d.seq as u64 | if verdict.is_err() { REJECT_BIT } else { 0 };
        let mut msg = ready.to_le_bytes().to_vec();
        if let Err(reason) = &verdict {
            msg.extend_from_slice(reason.as_bytes());
            msg.truncate(SOURCE_CTL_LEN - OFF_READY);
            warn!("rejecting session {}: {reason}", d.seq);
        }
        peer.put_ctl(OFF_READY as u64, &msg)?;
        if verdict.is_err() {
            return Ok(());
        }

        let (executed, counter) = (self.executed(), self.counter());
        let result = self.workload(d);
        let mut done = [0u8; 24];
        done[..8].copy_from_slice(&(d.seq as u64).to_le_bytes());
        done[8..16].copy_from_slice(&(self.executed() - executed).to_le_bytes());
        done[16..].copy_from_slice(&(self.counter() - counter).to_le_bytes());
        self.connect_back(&d.addr)?.put_ctl(OFF_DONE as u64, &done)?;
        result
    }

    fn workload(&mut self, d: &Descriptor) -> Result<(), BenchError> {
        let fs = d.frame_size as usize;
        let trailer = match d.mode {
            BenchMode::Ifunc => TRAILER_SIGNAL,
            BenchMode::Am => AM_TRAILER,
        };
        let timeout = self.timeout;
        match d.kind {
            Kind::Latency => {
                let mut reply: Option<Vec<u8>> = None;
                for _ in 0..d.count {
                    let deadline = Instant::now() + timeout;
                    if reply.is_none() {
                        // The reply echoes the first frame back.
                        let rx = self.local.rx.bytes();
                        if rx.load_byte(0) == 0 {
                            wait_change(rx, 0, 0, deadline, "first frame")?;
                        }
                        wait_value(rx, fs - 1, trailer, Some(deadline), "first frame")?;
                        reply = Some(rx[..fs].iter().map(|b| b.load(Ordering::Acquire)).collect());
                    }
                    self.local.run_one(0, &mut Vec::new(), deadline)?;
                    let peer = self.connect_back(&d.addr)?;
                    let (addr, rkey) = (peer.rx.addr(0), peer.rx.rkey);
                    peer.put_flush(reply.as_deref().unwrap(), addr, rkey)?;
                }
            }
            Kind::Throughput => {
                for _ in 0..d.count {
                    for i in 0..d.batch as usize {
                        self.local.run_one(i * fs, &mut Vec::new(), Instant::now() + timeout)?;
                    }
                    self.round += 1;
                    let round = self.round.to_le_bytes();
                    self.connect_back(&d.addr)?.put_ctl(OFF_ROUND as u64, &round)?;
                }
            }
            Kind::Xor => {
                let mut out = vec![0u8; d.payload_size as usize];
                self.local.run_one(0, &mut out, Instant::now() + timeout)?;
                let peer = self.connect_back(&d.addr)?;
                let (addr, rkey) = (peer.rx.addr(0), peer.rx.rkey);
                peer.put_flush(&out, addr, rkey)?;
            }
            Kind::Bye => {}
        }
        Ok(())
    }
}

/// The source role: one connection to a target, driving sessions.
pub struct Session {
    local: Local,
    peer: Peer,
    mode: BenchMode,
    runtime: RuntimeContext,
    addr: String,
    seq: u32,
    round: u64,
    timeout: Duration,
    _server: Option<ServerHandle>,
    target: Option<JoinHandle<Result<(), BenchError>>>,
}

impl Session {
    pub fn open(cfg: &BenchConfig) -> Result<Session, BenchError> {
        cfg.validate()?;
        let max = cfg.sizes.iter().copied().max().unwrap_or(0).max(DEMO_MAX_INPUT);
        let local = Local::new(cfg.mode, cfg.carrier, &cfg.lib_dir, max + 4096, SOURCE_CTL_LEN)?;
        // Builds frames only; the counter import is bound but never called here.
        let mut host = HostTable::with_std();
        add_counter(&mut host, Arc::default());
        let runtime = RuntimeContext::new(RuntimeConfig::new(&cfg.lib_dir).mode(cfg.carrier), host);
        let (peer, addr, server, target) = match &cfg.link {
            Link::Loopback => {
                let lib = cfg.target_lib_dir.as_deref().unwrap_or(&cfg.lib_dir);
                let mut target = Target::new(cfg.mode, cfg.target_carrier, lib, cfg.rx_len)?.with_timeout(cfg.timeout);
                target.peer = Some((String::new(), Peer::open(local.table.connect_loopback())?));
                let peer = Peer::open(target.regions().connect_loopback())?;
                let handle = thread::Builder::new().name("bench-target".into()).spawn(move || target.run(true))?;
                (peer, String::new(), None, Some(handle))
            }
            Link::Tcp(target_addr) => {
                let ep = Endpoint::connect(target_addr.as_str())?;
                let ip = ep.local_addr().map(|a| a.ip().to_string()).unwrap_or_else(|| "127.0.0.1".into());
                let server = local.table.serve(format!("{ip}:0"))?;
                let addr = server.local_addr().to_string();
                (Peer::open(ep)?, addr, Some(server), None)
            }
        };
        Ok(Session {
            local,
            peer,
            mode: cfg.mode,
            runtime,
            addr,
            seq: 0,
            round: 0,
            timeout: cfg.timeout,
            _server: server,
            target,
        })
    }

    pub fn mode(&self) -> BenchMode {
        self.mode
    }

    /// The frame this session sends for a payload of `size` bytes.
    pub fn frame(&self, size: usize) -> Result<Vec<u8>, BenchError> {
        match self.mode {
            BenchMode::Am => {
                Ok(encode_am_frame(AM_COUNTER_ID, &vec![0u8; size]).map_err(|e| BenchError::Config(e.to_string()))?)
            }
            BenchMode::Ifunc => {
                let h = self.runtime.register_ifunc(COUNTER)?;
                let msg = self.runtime.msg_create(&h, &vec![0u8; size])?;
                let frame = msg.frame().to_vec();
                self.runtime.msg_free(msg)?;
                Ok(frame)
            }
        }
    }

    fn begin(
        &mut self,
        kind: Kind,
        payload_size: usize,
        frame_size: usize,
        count: u64,
        batch: u32,
    ) -> Result<(u32, u8), BenchError> {
        self.seq += 1;
        let ctl = self.local.ctl.bytes();
        let ready_snap = ctl.load_byte(OFF_READY);
        let done_snap = ctl.load_byte(OFF_DONE);
        let desc = Descriptor {
            kind,
            mode: self.mode,
            seq: self.seq,
            payload_size: payload_size as u64,
            frame_size: frame_size as u64,
            count,
            batch,
            addr: self.addr.clone(),
        };
        self.peer.put_ctl(0, &desc.encode())?;
        wait_change(ctl, OFF_READY, ready_snap, Instant::now() + self.timeout, "session ack")?;
        let ready = read_u64(ctl, OFF_READY);
        if ready as u32 != self.seq {
            return Err(BenchError::Protocol(format!("ack for session {} while expecting {}", ready as u32, self.seq)));
        }
        if ready & REJECT_BIT != 0 {
            let mut reason = vec![0u8; SOURCE_CTL_LEN - OFF_READY - 8];
            ctl.read_into(OFF_READY + 8, &mut reason);
            let reason = String::from_utf8_lossy(&reason).trim_end_matches('\0').to_string();
            return Err(BenchError::Rejected(reason));
        }
        Ok((self.seq, done_snap))
    }

    /// Waits for the target's done ack and checks that it executed every
    /// frame sent (and, for counter workloads, bumped its counter as often).
    fn finish(&mut self, seq: u32, done_snap: u8, sent: u64, counts: bool) -> Result<u64, BenchError> {
        let ctl = self.local.ctl.bytes();
        wait_change(ctl, OFF_DONE, done_snap, Instant::now() + self.timeout, "session end")?;
        if read_u64(ctl, OFF_DONE) != seq as u64 {
            return Err(BenchError::Protocol("done ack for the wrong session".into()));
        }
        let executed = read_u64(ctl, OFF_EXECUTED);
        if executed != sent {
            return Err(BenchError::Conservation { sent, executed });
        }
        let counted = read_u64(ctl, OFF_COUNTER);
        if counts && counted != sent {
            return Err(BenchError::Conservation { sent, executed: counted });
        }
        Ok(executed)
    }

    /// Ping-pong: each side puts a frame into the other's buffer, flushes,
    /// and polls its own buffer until it executes. Reports RTT/2.
    pub fn latency(&mut self, size: usize, iterations: u32, warmup: u32) -> Result<BenchRecord, BenchError> {
        let frame = self.frame(size)?;
        let total = (iterations + warmup) as u64;
        let (seq, done_snap) = self.begin(Kind::Latency, size, frame.len(), total, 1)?;
        let (addr, rkey) = (self.peer.rx.addr(0), self.peer.rx.rkey);
        let replies_before = self.local.counter.load(Ordering::Relaxed);
        let mut samples = Vec::with_capacity(iterations as usize);
        let mut measured = Duration::ZERO;
        for i in 0..total {
            let t0 = Instant::now();
            self.peer.put_flush(&frame, addr, rkey)?;
            self.local.run_one(0, &mut Vec::new(), t0 + self.timeout)?;
            let rtt = t0.elapsed();
            if i >= warmup as u64 {
                samples.push(nanos(rtt) / 2);
                measured += rtt;
            }
        }
        let executed = self.finish(seq, done_snap, total, true)?;
        let replies = self.local.counter.load(Ordering::Relaxed) - replies_before;
        if replies != total {
            return Err(BenchError::Conservation { sent: total, executed: replies });
        }
        let (min_ns, median_ns, p99_ns) = summarize(&mut samples);
        Ok(BenchRecord {
            mode: self.mode,
            payload_size: size,
            frame_size: frame.len(),
            iterations: iterations as u64,
            min_ns,
            median_ns,
            p99_ns,
            msgs_per_sec: 2.0 * iterations as f64 / measured.as_secs_f64().max(1e-9),
            sent: total,
            executed,
        })
    }

    /// Batched throughput: each round packs `batch` frames back to back into
    /// the target's buffer, flushes, and waits for the target to put the next
    /// round number into this side's notification word. Samples are per
    /// message within a round.
    pub fn throughput(&mut self, size: usize, rounds: u32, warmup: u32, batch: u32) -> Result<BenchRecord, BenchError> {
        let frame = self.frame(size)?;
        let fs = frame.len();
        let fit = (self.peer.rx.len / fs as u64).max(1) as u32;
        let k = batch.min(fit);
        if k < batch {
            debug!("batch {batch} clamped to {k} for {fs} byte frames");
        }
        let total_rounds = (rounds + warmup) as u64;
        let (seq, done_snap) = self.begin(Kind::Throughput, size, fs, total_rounds, k)?;
        let ctl = self.local.ctl.bytes();
        let rkey = self.peer.rx.rkey;
        let mut samples = Vec::with_capacity(rounds as usize);
        let mut measured = Duration::ZERO;
        for r in 0..total_rounds {
            let snap = ctl.load_byte(OFF_ROUND);
            let t0 = Instant::now();
            for i in 0..k as u64 {
                self.peer.ep.put_nbi(&frame, self.peer.rx.addr(i * fs as u64), rkey)?;
            }
            self.peer.ep.flush()?;
            wait_change(ctl, OFF_ROUND, snap, t0 + self.timeout, "round notification")?;
            let elapsed = t0.elapsed();
            let round = read_u64(ctl, OFF_ROUND);
            if round != self.round + 1 {
                return Err(BenchError::Protocol(format!("round {round} after {}", self.round)));
            }
            self.round = round;
            if r >= warmup as u64 {
                samples.push(nanos(elapsed) / k as u64);
                measured += elapsed;
            }
        }
        let sent = total_rounds * k as u64;
        let executed = self.finish(seq, done_snap, sent, true)?;
        let (min_ns, median_ns, p99_ns) = summarize(&mut samples);
        let timed = rounds as u64 * k as u64;
        Ok(BenchRecord {
            mode: self.mode,
            payload_size: size,
            frame_size: fs,
            iterations: timed,
            min_ns,
            median_ns,
            p99_ns,
            msgs_per_sec: timed as f64 / measured.as_secs_f64().max(1e-9),
            sent,
            executed,
        })
    }

    /// Sends `input` through the `xor` ifunc and returns what the target's
    /// main decoded into its args.
    pub fn xor(&mut self, input: &[u8]) -> Result<Vec<u8>, BenchError> {
        if input.is_empty() || input.len() > DEMO_MAX_INPUT {
            return Err(BenchError::Config(format!("demo input must be 1..={DEMO_MAX_INPUT} bytes")));
        }
        let h = self.runtime.register_ifunc(XOR)?;
        let msg = self.runtime.msg_create(&h, input)?;
        let (seq, done_snap) = self.begin(Kind::Xor, input.len(), msg.frame_size(), 1, 1)?;
        crate::runtime::msg_send_nbix(&mut self.peer.ep, &msg, self.peer.rx.addr(0), self.peer.rx.rkey)?;
        self.peer.ep.flush()?;
        self.runtime.msg_free(msg)?;
        self.finish(seq, done_snap, 1, false)?;
        let mut out = vec![0u8; input.len()];
        self.local.rx.bytes().read_into(0, &mut out);
        Ok(out)
    }

    pub fn close(mut self) -> Result<(), BenchError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<(), BenchError> {
        let bye = Descriptor {
            kind: Kind::Bye,
            mode: self.mode,
            seq: self.seq + 1,
            payload_size: 0,
            frame_size: 0,
            count: 0,
            batch: 0,
            addr: self.addr.clone(),
        };
        let sent = self.peer.put_ctl(0, &bye.encode());
        if let Some(t) = self.target.take() {
            sent?;
            return t.join().map_err(|_| BenchError::Protocol("target thread panicked".into()))?;
        }
        Ok(sent?)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.target.is_some() {
            let _ = self.shutdown();
        }
    }
}

pub fn run_pingpong(cfg: &BenchConfig) -> Result<Vec<BenchRecord>, BenchError> {
    let mut s = Session::open(cfg)?;
    let mut records = Vec::new();
    for &size in &cfg.sizes {
        let r = s.latency(size, cfg.iterations, cfg.warmup)?;
        info!("latency {} {} B: median {} ns", r.mode, size, r.median_ns);
        records.push(r);
    }
    s.close()?;
    Ok(records)
}

pub fn run_throughput(cfg: &BenchConfig) -> Result<Vec<BenchRecord>, BenchError> {
    let mut s = Session::open(cfg)?;
    let mut records = Vec::new();
    for &size in &cfg.sizes {
        let r = s.throughput(size, cfg.iterations, cfg.warmup, cfg.batch)?;
        info!("throughput {} {} B: {:.0} msg/s", r.mode, size, r.msgs_per_sec);
        records.push(r);
    }
    s.close()?;
    Ok(records)
}
