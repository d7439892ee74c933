//! Ifunc message frames.
//!
//! A frame is a 64-byte header, a code section, a payload section and a
//! single trailer byte, laid out back to back:
//!
//! ```text
//! offset  size  field
//!      0     1  hdr_signal    0xA5 when a frame is present, 0x00 for an empty slot
//!      1     1  version       0x01
//!      2     1  flags         bit0: inline code unit (1) or package digest (0)
//!      3     1  name_len      1..=40
//!      4    40  name          [A-Za-z0-9_], zero padded
//!     44     4  code_size     LE
//!     48     4  payload_size  LE
//!     52     4  hdr_crc       LE, CRC-32C of the 64 header bytes with this field zeroed
//!     56     8  seq           LE
//!     64     -  code section, then payload section
//!   last     1  trailer       0x5A
//! ```

use std::fmt;
use std::sync::atomic::AtomicU8;

use thiserror::Error;

use crate::shmem::AtomicBytes;

pub const HEADER_LEN: usize = 64;
pub const HDR_SIGNAL: u8 = 0xA5;
pub const TRAILER_SIGNAL: u8 = 0x5A;
pub const FRAME_VERSION: u8 = 0x01;
pub const MAX_NAME_LEN: usize = 40;
/// Code section size of a digest-only frame (one SHA-256 digest).
pub const DIGEST_CODE_SIZE: u32 = 32;

const OFF_VERSION: usize = 1;
const OFF_FLAGS: usize = 2;
const OFF_NAME_LEN: usize = 3;
const OFF_NAME: usize = 4;
const OFF_CODE_SIZE: usize = 44;
const OFF_PAYLOAD_SIZE: usize = 48;
const OFF_CRC: usize = 52;
const OFF_SEQ: usize = 56;

/// CRC-32C (Castagnoli, reflected, init and final xor 0xFFFFFFFF).
pub fn crc32c(data: &[u8]) -> u32 {
    crc32c::crc32c(data)
}

/// How the code section of a frame carries the function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodeCarrier {
    /// The code section is a serialized code unit (imports + main).
    Inline,
    /// The code section is the SHA-256 digest of the package file.
    Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameFlags(u8);

impl FrameFlags {
    pub const INLINE_CODE: u8 = 0x01;
    const KNOWN: u8 = Self::INLINE_CODE;

    pub fn new(carrier: CodeCarrier) -> Self {
        match carrier {
            CodeCarrier::Inline => FrameFlags(Self::INLINE_CODE),
            CodeCarrier::Digest => FrameFlags(0),
        }
    }

    pub fn from_bits(bits: u8) -> Self {
        FrameFlags(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn carrier(self) -> CodeCarrier {
        if self.0 & Self::INLINE_CODE != 0 {
            CodeCarrier::Inline
        } else {
            CodeCarrier::Digest
        }
    }
}

/// An ifunc name as carried in the frame header: 1..=40 bytes of `[A-Za-z0-9_]`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IfuncName(String);

impl IfuncName {
    pub fn new(name: &str) -> Result<Self, FrameError> {
        if name.is_empty() || name.len() > MAX_NAME_LEN || !name.bytes().all(is_name_byte) {
            return Err(FrameError::InvalidName(name.to_string()));
        }
        Ok(IfuncName(name.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for IfuncName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.0, f)
    }
}

impl fmt::Display for IfuncName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub(crate) fn is_name_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("invalid ifunc name {0:?}")]
    InvalidName(String),
    #[error("digest-only frames carry exactly 32 code bytes, got {0}")]
    DigestSize(usize),
    #[error("frame of {0} bytes does not fit the wire format")]
    TooLarge(u64),
}

/// Why a present frame was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    BadVersion,
    BadCrc,
    BadName,
    /// Unknown flag bits, or a digest-only frame whose code size is not 32.
    BadLayout,
    /// The frame would extend past the receive buffer.
    TooLong,
    /// The frame digest does not match the locally installed package.
    DigestMismatch,
    /// The inline code section is malformed, fails validation, or differs
    /// from the local package.
    BadCode,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameHeader {
    pub flags: FrameFlags,
    pub name: IfuncName,
    pub code_size: u32,
    pub payload_size: u32,
    pub seq: u64,
}

impl FrameHeader {
    /// Total bytes occupied by the frame: header, code, payload and trailer.
    pub fn frame_size(&self) -> u64 {
        frame_size(self.code_size as u64, self.payload_size as u64)
    }

    pub fn code_range(&self) -> std::ops::Range<usize> {
        HEADER_LEN..HEADER_LEN + self.code_size as usize
    }

    pub fn payload_range(&self) -> std::ops::Range<usize> {
        let start = HEADER_LEN + self.code_size as usize;
        start..start + self.payload_size as usize
    }

    pub fn trailer_offset(&self) -> usize {
        (self.frame_size() - 1) as usize
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        let name = self.name.as_str().as_bytes();
        h[0] = HDR_SIGNAL;
        h[OFF_VERSION] = FRAME_VERSION;
        h[OFF_FLAGS] = self.flags.bits();
        h[OFF_NAME_LEN] = name.len() as u8;
        h[OFF_NAME..OFF_NAME + name.len()].copy_from_slice(name);
        h[OFF_CODE_SIZE..OFF_CODE_SIZE + 4].copy_from_slice(&self.code_size.to_le_bytes());
        h[OFF_PAYLOAD_SIZE..OFF_PAYLOAD_SIZE + 4].copy_from_slice(&self.payload_size.to_le_bytes());
        h[OFF_SEQ..OFF_SEQ + 8].copy_from_slice(&self.seq.to_le_bytes());
        let crc = crc32c(&h);
        h[OFF_CRC..OFF_CRC + 4].copy_from_slice(&crc.to_le_bytes());
        h
    }
}

pub fn frame_size(code_size: u64, payload_size: u64) -> u64 {
    HEADER_LEN as u64 + code_size + payload_size + 1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeaderStatus {
    NoMessage,
    Header(FrameHeader),
    Rejected(RejectReason),
}

/// Allocates a complete frame whose payload section is zeroed, ready to be
/// filled in place through [`payload_mut`].
pub fn alloc_frame(
    name: &IfuncName,
    flags: FrameFlags,
    code: &[u8],
    payload_size: usize,
    seq: u64,
) -> Result<Vec<u8>, FrameError> {
    if flags.carrier() == CodeCarrier::Digest && code.len() != DIGEST_CODE_SIZE as usize {
        return Err(FrameError::DigestSize(code.len()));
    }
    let total = frame_size(code.len() as u64, payload_size as u64);
    if code.len() > u32::MAX as usize || payload_size > u32::MAX as usize || total > isize::MAX as u64 {
        return Err(FrameError::TooLarge(total));
    }
    let header =
        FrameHeader { flags, name: name.clone(), code_size: code.len() as u32, payload_size: payload_size as u32, seq };
    let mut frame = vec![0u8; total as usize];
    frame[..HEADER_LEN].copy_from_slice(&header.to_bytes());
    frame[header.code_range()].copy_from_slice(code);
    frame[header.trailer_offset()] = TRAILER_SIGNAL;
    Ok(frame)
}

/// The payload section of a frame produced by [`alloc_frame`].
pub fn payload_mut(frame: &mut [u8]) -> &mut [u8] {
    let code_size = read_u32(frame, OFF_CODE_SIZE) as usize;
    let start = HEADER_LEN + code_size;
    let end = frame.len() - 1;
    &mut frame[start..end]
}

pub fn encode_frame(
    name: &str,
    flags: FrameFlags,
    code: &[u8],
    payload: &[u8],
    seq: u64,
) -> Result<Vec<u8>, FrameError> {
    let name = IfuncName::new(name)?;
    let mut frame = alloc_frame(&name, flags, code, payload.len(), seq)?;
    payload_mut(&mut frame).copy_from_slice(payload);
    Ok(frame)
}

/// Decodes the first 64 bytes of `header`. `capacity` is the number of bytes
/// available to the frame starting at the header; frames extending past it
/// are rejected as too long.
pub fn try_decode_header(header: &[u8], capacity: usize) -> HeaderStatus {
    if header.first() != Some(&HDR_SIGNAL) {
        return HeaderStatus::NoMessage;
    }
    if header.len() < HEADER_LEN {
        return HeaderStatus::Rejected(RejectReason::TooLong);
    }
    let h = &header[..HEADER_LEN];
    if h[OFF_VERSION] != FRAME_VERSION {
        return HeaderStatus::Rejected(RejectReason::BadVersion);
    }
    let mut zeroed = [0u8; HEADER_LEN];
    zeroed.copy_from_slice(h);
    zeroed[OFF_CRC..OFF_CRC + 4].fill(0);
    if crc32c(&zeroed) != read_u32(h, OFF_CRC) {
        return HeaderStatus::Rejected(RejectReason::BadCrc);
    }
    let name_len = h[OFF_NAME_LEN] as usize;
    if name_len == 0 || name_len > MAX_NAME_LEN {
        return HeaderStatus::Rejected(RejectReason::BadName);
    }
    let (name, padding) = h[OFF_NAME..OFF_NAME + MAX_NAME_LEN].split_at(name_len);
    if !name.iter().copied().all(is_name_byte) || padding.iter().any(|&b| b != 0) {
        return HeaderStatus::Rejected(RejectReason::BadName);
    }
    let flags = FrameFlags::from_bits(h[OFF_FLAGS]);
    let code_size = read_u32(h, OFF_CODE_SIZE);
    if flags.bits() & !FrameFlags::KNOWN != 0
        || (flags.carrier() == CodeCarrier::Digest && code_size != DIGEST_CODE_SIZE)
    {
        return HeaderStatus::Rejected(RejectReason::BadLayout);
    }
    let header = FrameHeader {
        flags,
        // Checked above.
        name: IfuncName(String::from_utf8(name.to_vec()).expect("ascii name")),
        code_size,
        payload_size: read_u32(h, OFF_PAYLOAD_SIZE),
        seq: u64::from_le_bytes(h[OFF_SEQ..OFF_SEQ + 8].try_into().unwrap()),
    };
    if header.frame_size() > capacity as u64 {
        return HeaderStatus::Rejected(RejectReason::TooLong);
    }
    HeaderStatus::Header(header)
}

/// Zeroes the header (signal included) and the trailer of a consumed frame.
/// Code and payload bytes are left in place.
pub fn clear_consumed(buffer: &[AtomicU8], header: &FrameHeader) {
    buffer.store_byte(0, 0);
    for i in 1..HEADER_LEN {
        buffer.store_byte(i, 0);
    }
    let trailer = header.trailer_offset();
    if trailer < buffer.len() {
        buffer.store_byte(trailer, 0);
    }
}

/// Plain-memory variant of [`clear_consumed`].
pub fn clear_consumed_bytes(buffer: &mut [u8], header: &FrameHeader) {
    buffer[..HEADER_LEN].fill(0);
    let trailer = header.trailer_offset();
    if trailer < buffer.len() {
        buffer[trailer] = 0;
    }
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}
