//! Wire records exchanged between endpoints and region servers.
//!
//! Every record is preceded by its length as a little-endian u32. The first
//! record on a connection is `HELLO` (magic `IFRM`, version 1); all others
//! start with a one-byte type.

use std::io::{self, Read, Write};

use super::{FaultCode, Perms, RegionInfo};

pub const HELLO_MAGIC: &[u8; 4] = b"IFRM";
pub const PROTOCOL_VERSION: u8 = 1;
/// Upper bound accepted for a single record body.
pub const MAX_RECORD_LEN: u32 = 1 << 30;

const T_PUT: u8 = 1;
const T_FLUSH: u8 = 2;
const T_FLUSH_ACK: u8 = 3;
const T_FAULT: u8 = 4;
const T_REGION_QUERY: u8 = 5;
const T_REGION_INFO: u8 = 6;

/// Size of a PUT record body without its data.
pub const PUT_OVERHEAD: usize = 1 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Put { rkey: u32, addr: u64, data: Vec<u8> },
    Flush { id: u64 },
    FlushAck { id: u64 },
    Fault { code: FaultCode, detail: u64 },
    RegionQuery { tag: String },
    RegionInfo(RegionInfo),
}

impl Record {
    pub fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&[0; 4]);
        match self {
            Record::Put { rkey, addr, data } => {
                out.push(T_PUT);
                out.extend_from_slice(&rkey.to_le_bytes());
                out.extend_from_slice(&addr.to_le_bytes());
                out.extend_from_slice(&(data.len() as u32).to_le_bytes());
                out.extend_from_slice(data);
            }
            Record::Flush { id } => {
                out.push(T_FLUSH);
                out.extend_from_slice(&id.to_le_bytes());
            }
            Record::FlushAck { id } => {
                out.push(T_FLUSH_ACK);
                out.extend_from_slice(&id.to_le_bytes());
            }
            Record::Fault { code, detail } => {
                out.push(T_FAULT);
                out.push(*code as u8);
                out.extend_from_slice(&detail.to_le_bytes());
            }
            Record::RegionQuery { tag } => {
                out.push(T_REGION_QUERY);
                out.push(tag.len() as u8);
                out.extend_from_slice(tag.as_bytes());
            }
            Record::RegionInfo(info) => {
                out.push(T_REGION_INFO);
                out.extend_from_slice(&info.base.to_le_bytes());
                out.extend_from_slice(&info.len.to_le_bytes());
                out.extend_from_slice(&info.rkey.to_le_bytes());
                out.push(info.perms.bits());
            }
        }
        let len = (out.len() - start - 4) as u32;
        out[start..start + 4].copy_from_slice(&len.to_le_bytes());
    }

    pub fn decode(body: &[u8]) -> io::Result<Record> {
        let mut r = Cursor { buf: body, pos: 0 };
        let rec = match r.u8()? {
            T_PUT => {
                let rkey = r.u32()?;
                let addr = r.u64()?;
                let len = r.u32()? as usize;
                let data = r.take(len)?.to_vec();
                Record::Put { rkey, addr, data }
            }
            T_FLUSH => Record::Flush { id: r.u64()? },
            T_FLUSH_ACK => Record::FlushAck { id: r.u64()? },
            T_FAULT => {
                let code = FaultCode::from_u8(r.u8()?).ok_or_else(|| invalid("unknown fault code"))?;
                Record::Fault { code, detail: r.u64()? }
            }
            T_REGION_QUERY => {
                let n = r.u8()? as usize;
                let tag = std::str::from_utf8(r.take(n)?).map_err(|_| invalid("tag is not utf-8"))?;
                Record::RegionQuery { tag: tag.to_string() }
            }
            T_REGION_INFO => Record::RegionInfo(RegionInfo {
                base: r.u64()?,
                len: r.u64()?,
                rkey: r.u32()?,
                perms: Perms::from_bits(r.u8()?),
            }),
            t => return Err(invalid(&format!("unknown record type {t}"))),
        };
        if r.pos != body.len() {
            return Err(invalid("trailing bytes in record"));
        }
        Ok(rec)
    }
}

/// Writes a PUT record without staging the data in an intermediate buffer.
pub fn write_put<W: Write>(w: &mut W, rkey: u32, addr: u64, data: &[u8]) -> io::Result<()> {
    let len = u32::try_from(PUT_OVERHEAD + data.len())
        .ok()
        .filter(|&l| l <= MAX_RECORD_LEN)
        .ok_or_else(|| invalid("put too large"))?;
    let mut head = [0u8; 4 + PUT_OVERHEAD];
    head[..4].copy_from_slice(&len.to_le_bytes());
    head[4] = T_PUT;
    head[5..9].copy_from_slice(&rkey.to_le_bytes());
    head[9..17].copy_from_slice(&addr.to_le_bytes());
    head[17..21].copy_from_slice(&(data.len() as u32).to_le_bytes());
    w.write_all(&head)?;
    w.write_all(data)
}

pub fn write_record<W: Write>(w: &mut W, rec: &Record) -> io::Result<()> {
    if let Record::Put { rkey, addr, data } = rec {
        return write_put(w, *rkey, *addr, data);
    }
    let mut buf = Vec::with_capacity(32);
    rec.encode(&mut buf);
    w.write_all(&buf)
}

/// Reads one length-prefixed body. `Ok(None)` on a clean end of stream.
pub fn read_body<R: Read>(r: &mut R, buf: &mut Vec<u8>) -> io::Result<Option<()>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_RECORD_LEN {
        return Err(invalid("record too long"));
    }
    buf.resize(len as usize, 0);
    r.read_exact(buf)?;
    Ok(Some(()))
}

pub fn read_record<R: Read>(r: &mut R) -> io::Result<Option<Record>> {
    let mut buf = Vec::new();
    match read_body(r, &mut buf)? {
        Some(()) => Record::decode(&buf).map(Some),
        None => Ok(None),
    }
}

pub fn write_hello<W: Write>(w: &mut W) -> io::Result<()> {
    let mut b = [0u8; 9];
    b[..4].copy_from_slice(&5u32.to_le_bytes());
    b[4..8].copy_from_slice(HELLO_MAGIC);
    b[8] = PROTOCOL_VERSION;
    w.write_all(&b)
}

pub fn check_hello(body: &[u8]) -> io::Result<()> {
    if body.len() == 5 && &body[..4] == HELLO_MAGIC && body[4] == PROTOCOL_VERSION {
        Ok(())
    } else {
        Err(invalid("bad HELLO"))
    }
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| invalid("truncated record"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
