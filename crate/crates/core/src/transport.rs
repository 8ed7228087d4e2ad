//! Wire format and channels between the user and the databases.
//!
//! Frame layout:
//!
//! ```text
//! +------------+-----+-----------+------------+----------------------+
//! | len: u32BE | tag | round u32BE | region u32BE | payload: len bytes |
//! +------------+-----+-----------+------------+----------------------+
//! ```
//!
//! `len` counts payload bytes; the payload is a sequence of 8-byte
//! little-endian integers. Outside `INIT_STORAGE` (which carries the
//! configuration, including `q` itself) every integer must be a reduced
//! field element.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use crate::roles::NodeService;

pub const HEADER_LEN: usize = 13;
/// Upper bound on a single payload.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame has {0} trailing bytes")]
    Trailing(usize),
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("payload length {0} is not a multiple of 8")]
    Misaligned(usize),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("element {value} not reduced modulo {modulus}")]
    Element { value: u64, modulus: u64 },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("database {db}: {source}")]
    Wire {
        db: usize,
        #[source]
        source: WireError,
    },
    #[error("database {db} closed the connection")]
    Closed { db: usize },
}

#[repr(u8)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    InitStorage = 1,
    ReadQuery = 2,
    ReadAnswer = 3,
    WriteQuery = 4,
    UpdateSymbols = 5,
    Commit = 6,
    Abort = 7,
    Ack = 8,
    Error = 9,
}

impl TryFrom<u8> for Tag {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            1 => Tag::InitStorage,
            2 => Tag::ReadQuery,
            3 => Tag::ReadAnswer,
            4 => Tag::WriteQuery,
            5 => Tag::UpdateSymbols,
            6 => Tag::Commit,
            7 => Tag::Abort,
            8 => Tag::Ack,
            9 => Tag::Error,
            other => return Err(WireError::UnknownTag(other)),
        })
    }
}

/// Error codes carried as the single payload word of an `ERROR` frame.
pub mod error_code {
    pub const MALFORMED: u64 = 1;
    pub const NOT_INITIALIZED: u64 = 2;
    pub const STALE_ROUND: u64 = 3;
    pub const PROTOCOL: u64 = 4;
    pub const UNEXPECTED: u64 = 5;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub tag: Tag,
    pub round: u32,
    pub region: u32,
    pub payload: Vec<u64>,
}

impl Message {
    pub fn new(tag: Tag, round: u32, region: u32, payload: Vec<u64>) -> Self {
        Message { tag, round, region, payload }
    }

    pub fn ack(round: u32, region: u32) -> Self {
        Message::new(Tag::Ack, round, region, Vec::new())
    }

    pub fn error(round: u32, region: u32, code: u64) -> Self {
        Message::new(Tag::Error, round, region, vec![code])
    }
}

fn check_elements(tag: Tag, payload: &[u64], modulus: Option<u64>) -> Result<(), WireError> {
    if let (Some(q), true) = (modulus, tag != Tag::InitStorage) {
        if let Some(&value) = payload.iter().find(|&&v| v >= q) {
            return Err(WireError::Element { value, modulus: q });
        }
    }
    Ok(())
}

/// Encodes a message. With `modulus` set, payload words must be reduced.
pub fn frame(msg: &Message, modulus: Option<u64>) -> Result<Vec<u8>, WireError> {
    check_elements(msg.tag, &msg.payload, modulus)?;
    let len = msg.payload.len() * 8;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(msg.tag as u8);
    out.extend_from_slice(&msg.round.to_be_bytes());
    out.extend_from_slice(&msg.region.to_be_bytes());
    for v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes exactly one complete frame.
pub fn unframe(bytes: &[u8], modulus: Option<u64>) -> Result<Message, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated { needed: HEADER_LEN, have: bytes.len() });
    }
    let len = u32::from_be_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    if len % 8 != 0 {
        return Err(WireError::Misaligned(len));
    }
    let tag = Tag::try_from(bytes[4])?;
    let round = u32::from_be_bytes(bytes[5..9].try_into().unwrap());
    let region = u32::from_be_bytes(bytes[9..13].try_into().unwrap());
    let needed = HEADER_LEN + len;
    if bytes.len() < needed {
        return Err(WireError::Truncated { needed, have: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(WireError::Trailing(bytes.len() - needed));
    }
    let payload: Vec<u64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_elements(tag, &payload, modulus)?;
    Ok(Message { tag, round, region, payload })
}

/// Reads one raw frame from a stream. `Ok(None)` on a clean end of stream
/// before any header byte.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated { needed: HEADER_LEN, have: got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header[0..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    // grow with the data actually received rather than the claimed length
    let mut buf = header.to_vec();
    reader.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != HEADER_LEN + len {
        return Err(WireError::Truncated { needed: HEADER_LEN + len, have: buf.len() });
    }
    Ok(Some(buf))
}

/// Request-response byte pipe to one database.
pub trait Channel: Send {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, WireError>;
}

/// Calls straight into a node living in this process, through the same
/// byte encoding as the socket channel.
pub struct InProcChannel {
    service: Arc<Mutex<NodeService>>,
}

impl InProcChannel {
    pub fn new(service: Arc<Mutex<NodeService>>) -> Self {
        InProcChannel { service }
    }

    pub fn service(&self) -> Arc<Mutex<NodeService>> {
        self.service.clone()
    }
}

impl Channel for InProcChannel {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, WireError> {
        Ok(self.service.lock().expect("node mutex poisoned").handle_frame(request))
    }
}

pub struct SocketChannel {
    stream: TcpStream,
}

impl SocketChannel {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(SocketChannel { stream })
    }
}

impl Channel for SocketChannel {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, WireError> {
        self.stream.write_all(request)?;
        self.stream.flush()?;
        read_frame(&mut self.stream)?.ok_or(WireError::Truncated { needed: HEADER_LEN, have: 0 })
    }
}

/// Frames as they crossed one link, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameLog {
    pub exchanges: Vec<(Vec<u8>, Vec<u8>)>,
}

/// The user's side of the connection to database `db`.
pub struct NodeLink {
    pub db: usize,
    channel: Box<dyn Channel>,
    modulus: Option<u64>,
    pub log: FrameLog,
}

impl NodeLink {
    pub fn new(db: usize, channel: Box<dyn Channel>) -> Self {
        NodeLink { db, channel, modulus: None, log: FrameLog::default() }
    }

    pub fn in_process(db: usize) -> (Self, Arc<Mutex<NodeService>>) {
        let service = Arc::new(Mutex::new(NodeService::new()));
        (NodeLink::new(db, Box::new(InProcChannel::new(service.clone()))), service)
    }

    pub fn socket<A: ToSocketAddrs>(db: usize, addr: A) -> io::Result<Self> {
        Ok(NodeLink::new(db, Box::new(SocketChannel::connect(addr)?)))
    }

    pub fn set_modulus(&mut self, q: u64) {
        self.modulus = Some(q);
    }

    pub fn call(&mut self, msg: &Message) -> Result<Message, TransportError> {
        let db = self.db;
        let wire = |source| TransportError::Wire { db, source };
        let request = frame(msg, self.modulus).map_err(wire)?;
        let reply = self.channel.exchange(&request).map_err(|e| match e {
            WireError::Truncated { have: 0, .. } => TransportError::Closed { db },
            e => wire(e),
        })?;
        let decoded = unframe(&reply, self.modulus).map_err(wire)?;
        self.log.exchanges.push((request, reply));
        Ok(decoded)
    }
}

/// A database daemon serving one [`NodeService`] over TCP. Connections get
/// their own thread; requests are serialized on the node.
pub struct NodeServer {
    addr: SocketAddr,
    service: Arc<Mutex<NodeService>>,
    handle: Option<JoinHandle<()>>,
}

impl NodeServer {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let service = Arc::new(Mutex::new(NodeService::new()));
        let shared = service.clone();
        let handle = thread::spawn(move || serve(listener, shared));
        Ok(NodeServer { addr, service, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn service(&self) -> Arc<Mutex<NodeService>> {
        self.service.clone()
    }

    /// Blocks on the accept loop.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Accept loop; returns only if the listener fails.
pub fn serve(listener: TcpListener, service: Arc<Mutex<NodeService>>) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        let service = service.clone();
        thread::spawn(move || {
            let _ = serve_connection(stream, &service);
        });
    }
}

fn serve_connection(mut stream: TcpStream, service: &Mutex<NodeService>) -> io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    stream.set_nodelay(true)?;
    loop {
        match read_frame(&mut stream) {
            Ok(None) => return Ok(()),
            Ok(Some(request)) => {
                let reply = service.lock().expect("node mutex poisoned").handle_frame(&request);
                stream.write_all(&reply)?;
            }
            Err(_) => {
                // framing is lost; report and drop the connection
                let reply = frame(&Message::error(0, 0, error_code::MALFORMED), None).expect("error frame");
                let _ = stream.write_all(&reply);
                return Ok(());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ack_frame_is_header_only() {
        let bytes = frame(&Message::ack(7, 2), Some(13)).unwrap();
        assert_eq!(bytes.len(), 13);
        assert_eq!(&bytes[..5], &[0, 0, 0, 0, Tag::Ack as u8]);
        assert_eq!(&bytes[5..9], &[0, 0, 0, 7]);
        assert_eq!(&bytes[9..13], &[0, 0, 0, 2]);
    }

    #[test]
    fn payload_is_little_endian_words() {
        let msg = Message::new(Tag::ReadAnswer, 1, 0, vec![10, 8]);
        let bytes = frame(&msg, Some(13)).unwrap();
        assert_eq!(bytes.len(), 13 + 16);
        assert_eq!(&bytes[0..4], &[0, 0, 0, 16]);
        assert_eq!(&bytes[13..21], &[10, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[21..29], &[8, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(unframe(&bytes, Some(13)).unwrap(), msg);
    }

    #[test]
    fn rejects_malformed() {
        let msg = Message::new(Tag::ReadAnswer, 1, 0, vec![10, 8]);
        let bytes = frame(&msg, Some(13)).unwrap();
        assert!(matches!(unframe(&bytes[..20], Some(13)), Err(WireError::Truncated { .. })));
        assert!(matches!(unframe(&bytes[..5], Some(13)), Err(WireError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(unframe(&extra, Some(13)), Err(WireError::Trailing(1))));
        let mut bad_tag = bytes.clone();
        bad_tag[4] = 42;
        assert!(matches!(unframe(&bad_tag, Some(13)), Err(WireError::UnknownTag(42))));
        assert!(matches!(unframe(&bytes, Some(7)), Err(WireError::Element { value: 10, modulus: 7 })));
        assert!(matches!(frame(&msg, Some(5)), Err(WireError::Element { .. })));
        let mut misaligned = bytes[..13].to_vec();
        misaligned[3] = 3;
        misaligned.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(unframe(&misaligned, None), Err(WireError::Misaligned(3))));
    }

    #[test]
    fn init_storage_is_exempt_from_range_check() {
        let msg = Message::new(Tag::InitStorage, 0, 0, vec![13, 4, 2]);
        assert_eq!(unframe(&frame(&msg, Some(13)).unwrap(), Some(13)).unwrap(), msg);
    }

    #[test]
    fn read_frame_from_stream() {
        let a = frame(&Message::ack(1, 0), None).unwrap();
        let b = frame(&Message::new(Tag::Commit, 1, 0, vec![3]), None).unwrap();
        let mut joined = a.clone();
        joined.extend_from_slice(&b);
        let mut cursor = io::Cursor::new(joined);
        assert_eq!(read_frame(&mut cursor).unwrap().unwrap(), a);
        assert_eq!(read_frame(&mut cursor).unwrap().unwrap(), b);
        assert!(read_frame(&mut cursor).unwrap().is_none());
        let mut short = io::Cursor::new(b[..15].to_vec());
        assert!(matches!(read_frame(&mut short), Err(WireError::Truncated { .. })));
    }

    fn tags() -> impl Strategy<Value = Tag> {
        (1u8..=9).prop_map(|t| Tag::try_from(t).unwrap())
    }

    proptest! {
        #[test]
        fn frame_round_trip(tag in tags(), round in any::<u32>(), region in any::<u32>(),
                            payload in proptest::collection::vec(0u64..2_147_483_647, 0..64)) {
            let msg = Message::new(tag, round, region, payload);
            let bytes = frame(&msg, Some(2_147_483_647)).unwrap();
            prop_assert_eq!(unframe(&bytes, Some(2_147_483_647)).unwrap(), msg);
        }

        #[test]
        fn fuzzed_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let _ = unframe(&bytes, Some(13));
            let _ = unframe(&bytes, None);
            let _ = read_frame(&mut io::Cursor::new(bytes));
        }
    }
}
