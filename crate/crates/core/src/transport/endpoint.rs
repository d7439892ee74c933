use std::io::{self, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;

use super::server::Connection;
use super::wire::{self, Record};
use super::{EndpointFault, FaultCode, RegionInfo, RegionTable, TransportError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointState {
    Ok,
    Error(EndpointFault),
}

/// Identifies a posted put. Completion is only known after a flush.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PutToken(pub u64);

enum Link {
    Tcp { rd: BufReader<TcpStream>, wr: BufWriter<TcpStream> },
    Loopback { tx: Sender<Record>, rx: Receiver<Record> },
}

impl Link {
    fn send_put(&mut self, rkey: u32, addr: u64, data: &[u8]) -> io::Result<()> {
        match self {
            Link::Tcp { wr, .. } => wire::write_put(wr, rkey, addr, data),
            Link::Loopback { tx, .. } => {
                tx.send(Record::Put { rkey, addr, data: data.to_vec() }).map_err(|_| down("loopback server gone"))
            }
        }
    }

    fn request(&mut self, rec: Record) -> io::Result<Record> {
        match self {
            Link::Tcp { rd, wr } => {
                wire::write_record(wr, &rec)?;
                wr.flush()?;
                wire::read_record(rd)?.ok_or_else(|| down("server closed the connection"))
            }
            Link::Loopback { tx, rx } => {
                tx.send(rec).map_err(|_| down("loopback server gone"))?;
                rx.recv().map_err(|_| down("loopback server gone"))
            }
        }
    }
}

fn down(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::ConnectionAborted, msg.to_string())
}

/// A client connection to one region server.
///
/// Puts are applied remotely in posting order. An endpoint is not meant to
/// be shared between threads without external locking.
pub struct Endpoint {
    link: Link,
    state: EndpointState,
    pending: u64,
    next_token: u64,
    next_flush: u64,
}

impl Endpoint {
    fn new(link: Link) -> Self {
        Endpoint { link, state: EndpointState::Ok, pending: 0, next_token: 0, next_flush: 1 }
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Endpoint, TransportError> {
        let stream = TcpStream::connect(addr).map_err(TransportError::Connect)?;
        stream.set_nodelay(true).map_err(TransportError::Connect)?;
        let rd = BufReader::new(stream.try_clone().map_err(TransportError::Connect)?);
        let mut wr = BufWriter::with_capacity(1 << 16, stream);
        wire::write_hello(&mut wr).map_err(TransportError::Connect)?;
        Ok(Endpoint::new(Link::Tcp { rd, wr }))
    }

    /// The local address of a TCP endpoint's socket.
    pub fn local_addr(&self) -> Option<std::net::SocketAddr> {
        match &self.link {
            Link::Tcp { wr, .. } => wr.get_ref().local_addr().ok(),
            Link::Loopback { .. } => None,
        }
    }

    pub fn state(&self) -> &EndpointState {
        &self.state
    }

    /// Puts posted since the last successful flush.
    pub fn pending_puts(&self) -> u64 {
        self.pending
    }

    fn check_ok(&self) -> Result<(), TransportError> {
        match &self.state {
            EndpointState::Ok => Ok(()),
            EndpointState::Error(f) => Err(TransportError::EndpointPoisoned(f.clone())),
        }
    }

    fn poison(&mut self, fault: EndpointFault) -> TransportError {
        self.state = EndpointState::Error(fault.clone());
        TransportError::EndpointPoisoned(fault)
    }

    fn link_down(&mut self, e: io::Error) -> TransportError {
        self.poison(EndpointFault::LinkDown(e.to_string()))
    }

    /// Posts a write of `data` at `remote_addr` without waiting for it to
    /// land.
    pub fn put_nbi(&mut self, data: &[u8], remote_addr: u64, rkey: u32) -> Result<PutToken, TransportError> {
        self.check_ok()?;
        if data.len() + wire::PUT_OVERHEAD > wire::MAX_RECORD_LEN as usize {
            return Err(TransportError::PutTooLarge(data.len()));
        }
        if let Err(e) = self.link.send_put(rkey, remote_addr, data) {
            return Err(self.link_down(e));
        }
        self.pending += 1;
        self.next_token += 1;
        Ok(PutToken(self.next_token))
    }

    /// Returns once every put posted so far has been applied remotely.
    pub fn flush(&mut self) -> Result<(), TransportError> {
        self.check_ok()?;
        if self.pending == 0 {
            return Ok(());
        }
        let id = self.next_flush;
        self.next_flush += 1;
        match self.link.request(Record::Flush { id }) {
            Ok(Record::FlushAck { id: got }) if got == id => {
                self.pending = 0;
                Ok(())
            }
            Ok(Record::Fault { code, detail }) => Err(self.poison(EndpointFault::Remote { code, detail })),
            Ok(other) => Err(self.poison(EndpointFault::LinkDown(format!("unexpected reply {other:?}")))),
            Err(e) => Err(self.link_down(e)),
        }
    }

    /// Out-of-band lookup of a region by tag.
    pub fn query_region(&mut self, tag: &str) -> Result<RegionInfo, TransportError> {
        self.check_ok()?;
        if tag.len() > super::MAX_TAG_LEN {
            return Err(TransportError::InvalidTag(tag.to_string()));
        }
        match self.link.request(Record::RegionQuery { tag: tag.to_string() }) {
            Ok(Record::RegionInfo(info)) => Ok(info),
            Ok(Record::Fault { code: FaultCode::UnknownRegion, .. }) => {
                Err(TransportError::UnknownRegion(tag.to_string()))
            }
            Ok(Record::Fault { code, detail }) => Err(self.poison(EndpointFault::Remote { code, detail })),
            Ok(other) => Err(self.poison(EndpointFault::LinkDown(format!("unexpected reply {other:?}")))),
            Err(e) => Err(self.link_down(e)),
        }
    }
}

impl RegionTable {
    /// An in-process endpoint whose records are applied by a dedicated
    /// thread, in order, exactly as a TCP connection would be.
    pub fn connect_loopback(self: &Arc<Self>) -> Endpoint {
        let (tx, srv_rx) = mpsc::channel::<Record>();
        let (srv_tx, rx) = mpsc::channel::<Record>();
        let table = Arc::clone(self);
        thread::Builder::new()
            .name("ifrm-loopback".into())
            .spawn(move || {
                let mut conn = Connection::new(table);
                for rec in srv_rx {
                    // Fault replies to puts are dropped here; the loopback
                    // client learns of them through its next request.
                    let is_put = matches!(rec, Record::Put { .. });
                    if let Some(reply) = conn.handle(rec) {
                        if !is_put && srv_tx.send(reply).is_err() {
                            break;
                        }
                    }
                }
            })
            .expect("spawn loopback thread");
        Endpoint::new(Link::Loopback { tx, rx })
    }
}
