use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use log::{debug, warn};

use super::wire::{self, Record};
use super::{FaultCode, RegionTable, TransportError};

/// Per-connection record handler shared by the TCP and loopback paths.
pub(crate) struct Connection {
    table: Arc<RegionTable>,
    fault: Option<(FaultCode, u64)>,
}

impl Connection {
    pub(crate) fn new(table: Arc<RegionTable>) -> Self {
        Connection { table, fault: None }
    }

    /// Handles one record, returning the reply to send, if any. After the
    /// first failed put no further puts are applied and every request is
    /// answered with the original fault.
    pub(crate) fn handle_put(&mut self, rkey: u32, addr: u64, data: &[u8]) -> Option<Record> {
        if self.fault.is_some() {
            return None;
        }
        match self.table.apply_put(rkey, addr, data) {
            Ok(()) => None,
            Err((code, detail)) => {
                debug!("put fault {code:?} rkey={rkey:#x} addr={addr:#x}");
                self.fault = Some((code, detail));
                Some(Record::Fault { code, detail })
            }
        }
    }

    pub(crate) fn handle(&mut self, rec: Record) -> Option<Record> {
        if let Some((code, detail)) = self.fault {
            return match rec {
                Record::Put { .. } => None,
                _ => Some(Record::Fault { code, detail }),
            };
        }
        match rec {
            Record::Put { rkey, addr, data } => self.handle_put(rkey, addr, &data),
            Record::Flush { id } => Some(Record::FlushAck { id }),
            Record::RegionQuery { tag } => Some(match self.table.lookup(&tag) {
                Some(r) => Record::RegionInfo(r.info()),
                None => Record::Fault { code: FaultCode::UnknownRegion, detail: 0 },
            }),
            other => {
                warn!("unexpected record from client: {other:?}");
                None
            }
        }
    }
}

/// A running TCP region server. Dropping the handle stops accepting new
/// connections; established connections run until their peer disconnects.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

impl RegionTable {
    /// Serves this table's regions on `listen`.
    pub fn serve(self: &Arc<Self>, listen: impl ToSocketAddrs) -> Result<ServerHandle, TransportError> {
        let listener = TcpListener::bind(listen).map_err(TransportError::BindFailure)?;
        let addr = listener.local_addr().map_err(TransportError::BindFailure)?;
        let stop = Arc::new(AtomicBool::new(false));
        let table = Arc::clone(self);
        let stop2 = Arc::clone(&stop);
        let accept = thread::Builder::new()
            .name("ifrm-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop2.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match conn {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    let table = Arc::clone(&table);
                    let _ = thread::Builder::new().name("ifrm-conn".into()).spawn(move || {
                        if let Err(e) = serve_connection(table, stream) {
                            debug!("connection closed: {e}");
                        }
                    });
                }
            })
            .map_err(TransportError::BindFailure)?;
        Ok(ServerHandle { addr, stop, accept: Some(accept) })
    }
}

fn serve_connection(table: Arc<RegionTable>, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut rd = BufReader::with_capacity(1 << 16, stream.try_clone()?);
    let mut wr = BufWriter::new(stream);
    let mut body = Vec::new();
    match wire::read_body(&mut rd, &mut body)? {
        Some(()) => wire::check_hello(&body)?,
        None => return Ok(()),
    }
    let mut conn = Connection::new(table);
    while wire::read_body(&mut rd, &mut body)?.is_some() {
        let reply = match parse_put(&body) {
            // Puts are applied straight from the receive buffer.
            Some((rkey, addr, data)) => conn.handle_put(rkey, addr, data),
            None => conn.handle(Record::decode(&body)?),
        };
        if let Some(reply) = reply {
            wire::write_record(&mut wr, &reply)?;
            wr.flush()?;
        }
    }
    Ok(())
}

fn parse_put(body: &[u8]) -> Option<(u32, u64, &[u8])> {
    if body.len() < wire::PUT_OVERHEAD || body[0] != 1 {
        return None;
    }
    let rkey = u32::from_le_bytes(body[1..5].try_into().unwrap());
    let addr = u64::from_le_bytes(body[5..13].try_into().unwrap());
    let len = u32::from_le_bytes(body[13..17].try_into().unwrap()) as usize;
    let data = &body[wire::PUT_OVERHEAD..];
    // A length mismatch falls through to the strict decoder, which rejects it.
    (data.len() == len).then_some((rkey, addr, data))
}
