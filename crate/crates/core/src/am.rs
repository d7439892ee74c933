//! Active-message baseline: the target registers handlers under numeric ids
//! ahead of time, and messages carry only the id and a payload.
//!
//! Frames travel over the same transport and follow the same signal, CRC and
//! trailer discipline as ifunc frames.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::frame::{crc32c, RejectReason};
use crate::shmem::{wait_mem, AtomicBytes};
use crate::transport::{Endpoint, PutToken, TransportError};
use crate::vm::Memory;

pub const AM_HEADER_LEN: usize = 16;
pub const AM_SIGNAL: u8 = 0xA6;
pub const AM_TRAILER: u8 = 0x6A;
pub const AM_VERSION: u8 = 1;
pub const AM_OVERHEAD: usize = AM_HEADER_LEN + 1;

const OFF_VERSION: usize = 1;
const OFF_ID: usize = 2;
const OFF_SIZE: usize = 4;
const OFF_CRC: usize = 8;
const OFF_RESERVED: usize = 12;

pub fn am_frame_size(payload_size: usize) -> usize {
    AM_OVERHEAD + payload_size
}

pub fn encode_am_frame(id: u16, payload: &[u8]) -> Result<Vec<u8>, AmError> {
    let size = u32::try_from(payload.len()).map_err(|_| AmError::TooLarge(payload.len()))?;
    let mut f = vec![0u8; am_frame_size(payload.len())];
    f[0] = AM_SIGNAL;
    f[OFF_VERSION] = AM_VERSION;
    f[OFF_ID..OFF_ID + 2].copy_from_slice(&id.to_le_bytes());
    f[OFF_SIZE..OFF_SIZE + 4].copy_from_slice(&size.to_le_bytes());
    let crc = crc32c(&f[..AM_HEADER_LEN]);
    f[OFF_CRC..OFF_CRC + 4].copy_from_slice(&crc.to_le_bytes());
    f[AM_HEADER_LEN..AM_HEADER_LEN + payload.len()].copy_from_slice(payload);
    *f.last_mut().unwrap() = AM_TRAILER;
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AmHeader {
    pub handler_id: u16,
    pub payload_size: u32,
}

impl AmHeader {
    pub fn frame_size(&self) -> usize {
        am_frame_size(self.payload_size as usize)
    }

    pub fn trailer_offset(&self) -> usize {
        AM_HEADER_LEN + self.payload_size as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmHeaderStatus {
    NoMessage,
    Header(AmHeader),
    Rejected(RejectReason),
}

pub fn try_decode_am_header(h: &[u8], capacity: usize) -> AmHeaderStatus {
    if h.first() != Some(&AM_SIGNAL) {
        return AmHeaderStatus::NoMessage;
    }
    if h.len() < AM_HEADER_LEN {
        return AmHeaderStatus::Rejected(RejectReason::TooLong);
    }
    if h[OFF_VERSION] != AM_VERSION {
        return AmHeaderStatus::Rejected(RejectReason::BadVersion);
    }
    let mut zeroed = [0u8; AM_HEADER_LEN];
    zeroed.copy_from_slice(&h[..AM_HEADER_LEN]);
    zeroed[OFF_CRC..OFF_CRC + 4].fill(0);
    if crc32c(&zeroed) != read_u32(h, OFF_CRC) {
        return AmHeaderStatus::Rejected(RejectReason::BadCrc);
    }
    if read_u32(h, OFF_RESERVED) != 0 {
        return AmHeaderStatus::Rejected(RejectReason::BadLayout);
    }
    let header =
        AmHeader { handler_id: u16::from_le_bytes([h[OFF_ID], h[OFF_ID + 1]]), payload_size: read_u32(h, OFF_SIZE) };
    if header.frame_size() > capacity {
        return AmHeaderStatus::Rejected(RejectReason::TooLong);
    }
    AmHeaderStatus::Header(header)
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

#[derive(Debug, Error)]
pub enum AmError {
    #[error("handler id {0} already registered")]
    DuplicateId(u16),
    #[error("handler table is sealed")]
    TableSealed,
    #[error("payload of {0} bytes does not fit an AM frame")]
    TooLarge(usize),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// A target-side handler: gets the payload bytes in the receive buffer and
/// the caller's args region.
pub type AmHandler = Arc<dyn Fn(&[AtomicU8], &mut dyn Memory) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmPollStatus {
    Executed,
    NoMessage,
    Rejected(RejectReason),
    UnknownHandler(u16),
    Timeout,
}

/// Handlers by id. The table seals itself on the first poll.
pub struct AmHandlerTable {
    handlers: HashMap<u16, AmHandler>,
    sealed: AtomicBool,
    poll_timeout: Duration,
}

impl Default for AmHandlerTable {
    fn default() -> Self {
        AmHandlerTable::new()
    }
}

impl AmHandlerTable {
    pub fn new() -> Self {
        AmHandlerTable {
            handlers: HashMap::new(),
            sealed: AtomicBool::new(false),
            poll_timeout: crate::runtime::DEFAULT_POLL_TIMEOUT,
        }
    }

    pub fn with_poll_timeout(mut self, timeout: Duration) -> Self {
        self.poll_timeout = timeout;
        self
    }

    pub fn am_register<F>(&mut self, id: u16, f: F) -> Result<(), AmError>
    where
        F: Fn(&[AtomicU8], &mut dyn Memory) + Send + Sync + 'static,
    {
        if self.is_sealed() {
            return Err(AmError::TableSealed);
        }
        if self.handlers.contains_key(&id) {
            return Err(AmError::DuplicateId(id));
        }
        self.handlers.insert(id, Arc::new(f));
        Ok(())
    }

    pub fn seal(&self) {
        self.sealed.store(true, Ordering::Release);
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed.load(Ordering::Acquire)
    }

    /// Same state machine as the ifunc poller, dispatching on the handler id.
    pub fn am_poll(&self, buffer: &[AtomicU8], target_args: &mut dyn Memory) -> AmPollStatus {
        self.seal();
        if buffer.is_empty() || buffer.load_byte(0) != AM_SIGNAL {
            return AmPollStatus::NoMessage;
        }
        if buffer.len() < AM_HEADER_LEN {
            buffer.store_byte(0, 0);
            return AmPollStatus::Rejected(RejectReason::TooLong);
        }
        let mut raw = [0u8; AM_HEADER_LEN];
        buffer.read_into(0, &mut raw);
        let header = match try_decode_am_header(&raw, buffer.len()) {
            AmHeaderStatus::NoMessage => return AmPollStatus::NoMessage,
            AmHeaderStatus::Rejected(r) => {
                buffer.store_byte(0, 0);
                return AmPollStatus::Rejected(r);
            }
            AmHeaderStatus::Header(h) => h,
        };
        let trailer = header.trailer_offset();
        let deadline = Instant::now() + self.poll_timeout;
        loop {
            let seen = buffer.load_byte(trailer);
            if seen == AM_TRAILER {
                break;
            }
            if wait_mem(buffer, trailer, seen, Some(deadline)).is_err() {
                return AmPollStatus::Timeout;
            }
        }
        let status = match self.handlers.get(&header.handler_id) {
            Some(h) => {
                h(&buffer[AM_HEADER_LEN..trailer], target_args);
                AmPollStatus::Executed
            }
            None => AmPollStatus::UnknownHandler(header.handler_id),
        };
        for i in 0..AM_HEADER_LEN {
            buffer.store_byte(i, 0);
        }
        buffer.store_byte(trailer, 0);
        status
    }
}

/// Posts one frame as a single put.
pub fn am_msg_send(
    ep: &mut Endpoint,
    id: u16,
    payload: &[u8],
    remote_addr: u64,
    rkey: u32,
) -> Result<PutToken, AmError> {
    let frame = encode_am_frame(id, payload)?;
    Ok(ep.put_nbi(&frame, remote_addr, rkey)?)
}
