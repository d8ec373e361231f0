//! TCP plugin.
//!
//! Every unit on a connection is a frame: the wire header followed by
//! `payload_len` bytes. Metadata (REQUEST/RESPONSE/ERROR) frames surface as
//! unexpected messages. One-sided access is emulated with control frames:
//!
//! ```text
//! get:  initiator --BULK_GET{key,offset,length,cookie}--> holder
//!       initiator <--BULK_DATA{cookie,index,bytes}*------ holder
//!       initiator <--BULK_ACK{cookie,status}------------- holder
//! put:  initiator --BULK_PUT{key,offset,length,cookie}--> holder
//!       initiator --BULK_DATA{cookie,index,bytes}*------> holder
//!       initiator <--BULK_ACK{cookie,status}------------- holder
//! ```
//!
//! A connection opened by this endpoint starts with a HELLO frame carrying
//! our listen address (empty for origin-only endpoints). Connections are
//! opened lazily on first use and cached per peer; a peer reached first
//! through an inbound connection is answered on that connection. Loss of a
//! connection fails every operation bound to it with TRANSPORT_ERROR.
//!
//! Socket I/O runs on per-connection reader and writer threads; `progress`
//! only collects what they finished.

use std::collections::{HashMap, VecDeque};
use std::io::{BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};

use super::{
    Endpoint, MemRegion, MemoryKey, NalCompletion, NalConfig, NalError, NalStats, NalStatus,
    NetAddress, OpKind, OpToken, Permission, RemoteAccess, Result, Tag, Transport,
};
use crate::wire::{
    decode_header, encode_frame, Flags, MessageHeader, MessageKind, RpcId, HEADER_LEN,
};

pub const PLUGIN: &str = "tcp";
/// Payload bytes per BULK_DATA frame.
pub const BULK_CHUNK: usize = 256 * 1024;
/// BULK_GET / BULK_PUT payload: key ‖ offset ‖ length ‖ cookie.
pub const BULK_REQUEST_LEN: usize = 32;
/// BULK_DATA prefix: cookie ‖ chunk index.
pub const BULK_DATA_PREFIX: usize = 12;
/// BULK_ACK payload: cookie ‖ status.
pub const BULK_ACK_LEN: usize = 9;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const ACCEPT_POLL: Duration = Duration::from_millis(2);
const MAX_HELLO: usize = 1024;

type ConnId = u64;

/// Body of a BULK_GET or BULK_PUT frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BulkRequest {
    pub key: MemoryKey,
    pub offset: u64,
    pub length: u64,
    pub cookie: u64,
}

impl BulkRequest {
    pub fn encode(&self) -> [u8; BULK_REQUEST_LEN] {
        let mut b = [0u8; BULK_REQUEST_LEN];
        b[0..8].copy_from_slice(&self.key.0.to_le_bytes());
        b[8..16].copy_from_slice(&self.offset.to_le_bytes());
        b[16..24].copy_from_slice(&self.length.to_le_bytes());
        b[24..32].copy_from_slice(&self.cookie.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() != BULK_REQUEST_LEN {
            return None;
        }
        let word = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        Some(Self {
            key: MemoryKey(word(0)),
            offset: word(8),
            length: word(16),
            cookie: word(24),
        })
    }
}

fn control_frame(kind: MessageKind, cookie: u64, payload: &[u8]) -> Vec<u8> {
    encode_frame(
        MessageHeader::new(kind, RpcId(0), cookie, Flags::NONE, 0),
        payload,
    )
    .expect("control payloads are small")
}

pub fn ack_frame(cookie: u64, status: NalStatus) -> Vec<u8> {
    let mut p = [0u8; BULK_ACK_LEN];
    p[0..8].copy_from_slice(&cookie.to_le_bytes());
    p[8] = status as u8;
    control_frame(MessageKind::BulkAck, cookie, &p)
}

pub fn data_frame(cookie: u64, index: u32, chunk: &[u8]) -> Vec<u8> {
    let mut p = Vec::with_capacity(BULK_DATA_PREFIX + chunk.len());
    p.extend_from_slice(&cookie.to_le_bytes());
    p.extend_from_slice(&index.to_le_bytes());
    p.extend_from_slice(chunk);
    control_frame(MessageKind::BulkData, cookie, &p)
}

enum Outgoing {
    Frame {
        bytes: Vec<u8>,
        token: Option<OpToken>,
    },
    /// BULK_PUT followed by its data chunks, read from the region as they are written.
    PutStream {
        request: BulkRequest,
        region: MemRegion,
        offset: usize,
    },
    /// Data chunks and a final OK ack answering a BULK_GET.
    GetReply {
        cookie: u64,
        region: MemRegion,
        offset: usize,
        length: usize,
    },
}

struct Conn {
    tx: mpsc::Sender<Outgoing>,
    stream: Option<TcpStream>,
}

struct Transfer {
    region: MemRegion,
    offset: usize,
    length: usize,
    received: usize,
}

struct Pending {
    kind: OpKind,
    tag: Tag,
    conn: ConnId,
    transfer: Option<Transfer>,
}

#[derive(Default)]
struct State {
    open: bool,
    unexpected: VecDeque<NalCompletion>,
    completions: Vec<NalCompletion>,
    arrivals: usize,
    pending: HashMap<OpToken, Pending>,
    conns: HashMap<ConnId, Conn>,
    routes: HashMap<NetAddress, ConnId>,
}

struct Shared {
    address: Option<NetAddress>,
    config: NalConfig,
    stats: Arc<NalStats>,
    state: Mutex<State>,
    wake: Condvar,
    regions: RwLock<HashMap<MemoryKey, (MemRegion, Permission)>>,
    next_key: AtomicU64,
    next_token: AtomicU64,
    next_conn: AtomicU64,
}

impl Shared {
    fn complete_locked(&self, st: &mut State, token: OpToken, status: NalStatus) -> bool {
        match st.pending.remove(&token) {
            Some(p) => {
                st.completions
                    .push(NalCompletion::of(p.kind, status, token, p.tag));
                self.wake.notify_all();
                true
            }
            None => false,
        }
    }

    fn complete(&self, token: OpToken, status: NalStatus) {
        let mut st = self.state.lock();
        self.complete_locked(&mut st, token, status);
    }

    fn is_pending(&self, token: OpToken) -> bool {
        self.state.lock().pending.contains_key(&token)
    }

    /// Tears a connection down and fails everything bound to it. Idempotent.
    fn fail_conn(&self, id: ConnId) {
        let mut st = self.state.lock();
        if let Some(conn) = st.conns.remove(&id) {
            if let Some(s) = conn.stream {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        st.routes.retain(|_, c| *c != id);
        let doomed: Vec<OpToken> = st
            .pending
            .iter()
            .filter(|(_, p)| p.conn == id)
            .map(|(t, _)| *t)
            .collect();
        for t in doomed {
            self.complete_locked(&mut st, t, NalStatus::TransportError);
        }
    }

    fn region(&self, key: MemoryKey) -> Option<(MemRegion, Permission)> {
        self.regions.read().get(&key).cloned()
    }

    /// Validates a remote request against the exposed regions.
    fn check_access(&self, req: &BulkRequest, write: bool) -> std::result::Result<MemRegion, NalStatus> {
        let (region, perm) = self.region(req.key).ok_or(NalStatus::RemoteError)?;
        let allowed = if write { perm.can_write() } else { perm.can_read() };
        let in_range = req
            .offset
            .checked_add(req.length)
            .is_some_and(|end| end <= region.len() as u64);
        if allowed && in_range {
            Ok(region)
        } else {
            Err(NalStatus::RemoteError)
        }
    }

    /// Finds or opens the connection used to reach `dest`.
    fn route(self: &Arc<Self>, st: &mut State, dest: &NetAddress) -> Result<ConnId> {
        if dest.plugin() != PLUGIN {
            return Err(NalError::WrongPlugin(dest.canonical(), PLUGIN.into()));
        }
        if let Some(id) = st.routes.get(dest) {
            return Ok(*id);
        }
        let id = self.next_conn.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        st.conns.insert(id, Conn { tx, stream: None });
        st.routes.insert(dest.clone(), id);
        let shared = self.clone();
        let peer = dest.clone();
        thread::Builder::new()
            .name(format!("tcp-out-{id}"))
            .spawn(move || outbound_writer(shared, id, peer, rx))
            .expect("spawn writer thread");
        Ok(id)
    }

    fn submit(self: &Arc<Self>, dest: &NetAddress, kind: OpKind, tag: Tag, transfer: Option<Transfer>, make: impl FnOnce(OpToken) -> Outgoing) -> Result<OpToken> {
        let token = OpToken(self.next_token.fetch_add(1, Ordering::SeqCst));
        let mut st = self.state.lock();
        if !st.open {
            return Err(NalError::Closed);
        }
        let conn = self.route(&mut st, dest)?;
        st.pending.insert(
            token,
            Pending {
                kind,
                tag,
                conn,
                transfer,
            },
        );
        let sent = st
            .conns
            .get(&conn)
            .map(|c| c.tx.send(make(token)).is_ok())
            .unwrap_or(false);
        if !sent {
            self.complete_locked(&mut st, token, NalStatus::TransportError);
        }
        Ok(token)
    }

    /// Completes an operation that needs no network traffic, on the next progress.
    fn complete_later(&self, kind: OpKind, tag: Tag) -> Result<OpToken> {
        let token = OpToken(self.next_token.fetch_add(1, Ordering::SeqCst));
        let mut st = self.state.lock();
        if !st.open {
            return Err(NalError::Closed);
        }
        st.completions
            .push(NalCompletion::of(kind, NalStatus::Ok, token, tag));
        self.wake.notify_all();
        Ok(token)
    }
}

fn write_frame(shared: &Shared, stream: &mut TcpStream, bytes: &[u8]) -> std::io::Result<()> {
    stream.write_all(bytes)?;
    if let Ok(kind) = MessageKind::from_u8(bytes[5]) {
        shared.stats.record_frame(kind, bytes.len());
    }
    Ok(())
}

fn stream_chunks(
    shared: &Shared,
    stream: &mut TcpStream,
    cookie: u64,
    region: &MemRegion,
    offset: usize,
    length: usize,
) -> std::io::Result<()> {
    let mut buf = vec![0u8; length.min(BULK_CHUNK)];
    let mut done = 0;
    let mut index = 0u32;
    while done < length {
        let n = (length - done).min(BULK_CHUNK);
        region.read_at(offset + done, &mut buf[..n]);
        write_frame(shared, stream, &data_frame(cookie, index, &buf[..n]))?;
        done += n;
        index += 1;
    }
    Ok(())
}

fn writer_loop(shared: &Arc<Shared>, id: ConnId, mut stream: TcpStream, rx: mpsc::Receiver<Outgoing>) {
    for item in rx {
        let res = match item {
            Outgoing::Frame { bytes, token } => {
                if token.is_some_and(|t| !shared.is_pending(t)) {
                    continue;
                }
                let r = write_frame(shared, &mut stream, &bytes);
                if r.is_ok() {
                    if let Some(t) = token {
                        shared.complete(t, NalStatus::Ok);
                    }
                }
                r
            }
            Outgoing::PutStream {
                request,
                region,
                offset,
            } => write_frame(
                shared,
                &mut stream,
                &control_frame(MessageKind::BulkPut, request.cookie, &request.encode()),
            )
            .and_then(|_| {
                stream_chunks(
                    shared,
                    &mut stream,
                    request.cookie,
                    &region,
                    offset,
                    request.length as usize,
                )
            }),
            Outgoing::GetReply {
                cookie,
                region,
                offset,
                length,
            } => stream_chunks(shared, &mut stream, cookie, &region, offset, length)
                .and_then(|_| write_frame(shared, &mut stream, &ack_frame(cookie, NalStatus::Ok))),
        };
        if res.is_err() {
            shared.fail_conn(id);
            return;
        }
    }
}

fn connect(locator: &str) -> std::io::Result<TcpStream> {
    let mut last = None;
    for addr in locator.to_socket_addrs()? {
        match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| std::io::Error::other("no socket address")))
}

fn outbound_writer(shared: Arc<Shared>, id: ConnId, peer: NetAddress, rx: mpsc::Receiver<Outgoing>) {
    let stream = match connect(peer.locator()) {
        Ok(s) => s,
        Err(_) => {
            shared.fail_conn(id);
            return;
        }
    };
    let _ = stream.set_nodelay(true);
    let (reader_stream, tx) = {
        let mut st = shared.state.lock();
        let Some(conn) = st.conns.get_mut(&id) else {
            let _ = stream.shutdown(Shutdown::Both);
            return;
        };
        let Ok(clone) = stream.try_clone() else {
            drop(st);
            shared.fail_conn(id);
            return;
        };
        conn.stream = Some(clone);
        (stream.try_clone(), conn.tx.clone())
    };
    let Ok(reader_stream) = reader_stream else {
        shared.fail_conn(id);
        return;
    };
    let reader_shared = shared.clone();
    let peer_for_reader = peer.clone();
    thread::Builder::new()
        .name(format!("tcp-rd-{id}"))
        .spawn(move || reader_loop(reader_shared, id, reader_stream, Some(peer_for_reader), None, tx))
        .expect("spawn reader thread");
    let hello = shared
        .address
        .as_ref()
        .map(|a| a.canonical())
        .unwrap_or_default();
    let mut stream = stream;
    if write_frame(
        &shared,
        &mut stream,
        &control_frame(MessageKind::Hello, 0, hello.as_bytes()),
    )
    .is_err()
    {
        shared.fail_conn(id);
        return;
    }
    writer_loop(&shared, id, stream, rx);
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    loop {
        if !shared.state.lock().open {
            return;
        }
        match listener.accept() {
            Ok((stream, sock)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let (Ok(rd), Ok(keep)) = (stream.try_clone(), stream.try_clone()) else {
                    continue;
                };
                let id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
                let (tx, rx) = mpsc::channel();
                {
                    let mut st = shared.state.lock();
                    if !st.open {
                        let _ = stream.shutdown(Shutdown::Both);
                        return;
                    }
                    st.conns.insert(
                        id,
                        Conn {
                            tx: tx.clone(),
                            stream: Some(keep),
                        },
                    );
                }
                let s = shared.clone();
                thread::Builder::new()
                    .name(format!("tcp-rd-{id}"))
                    .spawn(move || reader_loop(s, id, rd, None, Some(sock), tx))
                    .expect("spawn reader thread");
                let s = shared.clone();
                thread::Builder::new()
                    .name(format!("tcp-wr-{id}"))
                    .spawn(move || writer_loop(&s, id, stream, rx))
                    .expect("spawn writer thread");
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(_) => thread::sleep(ACCEPT_POLL),
        }
    }
}

struct IncomingPut {
    /// `None` once the put was rejected; remaining chunks are discarded.
    region: Option<MemRegion>,
    base: usize,
    length: usize,
    received: usize,
}

/// Why a connection's reader stopped.
#[derive(Debug)]
enum Stop {
    Io,
    Protocol,
    Overflow,
}

fn reader_loop(
    shared: Arc<Shared>,
    id: ConnId,
    stream: TcpStream,
    peer: Option<NetAddress>,
    inbound_from: Option<SocketAddr>,
    tx: mpsc::Sender<Outgoing>,
) {
    let mut reader = Reader {
        shared: &shared,
        id,
        peer,
        inbound_from,
        tx,
        puts: HashMap::new(),
    };
    let mut input = BufReader::with_capacity(BULK_CHUNK + 64, stream);
    let _stop: Stop = loop {
        if let Err(stop) = reader.next(&mut input) {
            break stop;
        }
    };
    shared.fail_conn(id);
}

struct Reader<'a> {
    shared: &'a Arc<Shared>,
    id: ConnId,
    peer: Option<NetAddress>,
    inbound_from: Option<SocketAddr>,
    tx: mpsc::Sender<Outgoing>,
    puts: HashMap<u64, IncomingPut>,
}

impl Reader<'_> {
    fn next(&mut self, input: &mut impl Read) -> std::result::Result<(), Stop> {
        let mut raw = [0u8; HEADER_LEN];
        input.read_exact(&mut raw).map_err(|_| Stop::Io)?;
        let header = decode_header(&raw).map_err(|_| Stop::Protocol)?;
        let len = header.payload_len as usize;
        let len_ok = match header.kind {
            k if k.is_metadata() => len <= self.shared.config.eager_limit,
            MessageKind::BulkGet | MessageKind::BulkPut => len == BULK_REQUEST_LEN,
            MessageKind::BulkData => (BULK_DATA_PREFIX..=BULK_DATA_PREFIX + BULK_CHUNK).contains(&len),
            MessageKind::BulkAck => len == BULK_ACK_LEN,
            MessageKind::Hello => len <= MAX_HELLO,
            _ => false,
        };
        if !len_ok {
            return Err(Stop::Protocol);
        }
        let mut payload = vec![0u8; len];
        input.read_exact(&mut payload).map_err(|_| Stop::Io)?;
        match header.kind {
            MessageKind::Hello => self.hello(&payload),
            MessageKind::Request | MessageKind::Response | MessageKind::Error => {
                self.unexpected(&raw, payload)
            }
            MessageKind::BulkGet => self.bulk_get(&payload),
            MessageKind::BulkPut => self.bulk_put(&payload),
            MessageKind::BulkData => self.bulk_data(&payload),
            MessageKind::BulkAck => self.bulk_ack(&payload),
        }
    }

    fn reply(&self, item: Outgoing) -> std::result::Result<(), Stop> {
        self.tx.send(item).map_err(|_| Stop::Io)
    }

    fn hello(&mut self, payload: &[u8]) -> std::result::Result<(), Stop> {
        let Some(sock) = self.inbound_from else {
            return Err(Stop::Protocol);
        };
        if self.peer.is_some() {
            return Err(Stop::Protocol);
        }
        let addr = if payload.is_empty() {
            NetAddress::new(PLUGIN, sock.to_string())
        } else {
            let text = std::str::from_utf8(payload).map_err(|_| Stop::Protocol)?;
            NetAddress::parse_syntax(text).map_err(|_| Stop::Protocol)?
        };
        let mut st = self.shared.state.lock();
        st.routes.entry(addr.clone()).or_insert(self.id);
        self.peer = Some(addr);
        Ok(())
    }

    fn unexpected(&mut self, raw: &[u8], payload: Vec<u8>) -> std::result::Result<(), Stop> {
        let source = self.peer.clone().ok_or(Stop::Protocol)?;
        let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
        frame.extend_from_slice(raw);
        frame.extend_from_slice(&payload);
        let mut st = self.shared.state.lock();
        if st.unexpected.len() >= self.shared.config.unexpected_capacity {
            return Err(Stop::Overflow);
        }
        self.shared.stats.record_received(frame.len());
        st.unexpected
            .push_back(NalCompletion::received(source, frame));
        st.arrivals += 1;
        self.shared.wake.notify_all();
        Ok(())
    }

    fn bulk_get(&mut self, payload: &[u8]) -> std::result::Result<(), Stop> {
        let req = BulkRequest::decode(payload).ok_or(Stop::Protocol)?;
        match self.shared.check_access(&req, false) {
            Ok(region) => self.reply(Outgoing::GetReply {
                cookie: req.cookie,
                region,
                offset: req.offset as usize,
                length: req.length as usize,
            }),
            Err(status) => self.reply(Outgoing::Frame {
                bytes: ack_frame(req.cookie, status),
                token: None,
            }),
        }
    }

    fn bulk_put(&mut self, payload: &[u8]) -> std::result::Result<(), Stop> {
        let req = BulkRequest::decode(payload).ok_or(Stop::Protocol)?;
        let checked = self.shared.check_access(&req, true);
        let status = match &checked {
            Ok(_) => NalStatus::Ok,
            Err(s) => *s,
        };
        if req.length == 0 || checked.is_err() {
            self.reply(Outgoing::Frame {
                bytes: ack_frame(req.cookie, status),
                token: None,
            })?;
        }
        if req.length > 0 {
            self.puts.insert(
                req.cookie,
                IncomingPut {
                    region: checked.ok(),
                    base: req.offset as usize,
                    length: req.length as usize,
                    received: 0,
                },
            );
        }
        Ok(())
    }

    fn bulk_data(&mut self, payload: &[u8]) -> std::result::Result<(), Stop> {
        let cookie = u64::from_le_bytes(payload[0..8].try_into().unwrap());
        let index = u32::from_le_bytes(payload[8..12].try_into().unwrap()) as usize;
        let chunk = &payload[BULK_DATA_PREFIX..];
        let at = index * BULK_CHUNK;

        if let Some(put) = self.puts.get_mut(&cookie) {
            if at + chunk.len() > put.length {
                return Err(Stop::Protocol);
            }
            if let Some(region) = &put.region {
                region.write_at(put.base + at, chunk);
            }
            put.received += chunk.len();
            if put.received >= put.length {
                let put = self.puts.remove(&cookie).expect("present");
                if put.region.is_some() {
                    self.reply(Outgoing::Frame {
                        bytes: ack_frame(cookie, NalStatus::Ok),
                        token: None,
                    })?;
                }
            }
            return Ok(());
        }

        let token = OpToken(cookie);
        let target = {
            let st = self.shared.state.lock();
            st.pending
                .get(&token)
                .and_then(|p| p.transfer.as_ref())
                .map(|t| (t.region.clone(), t.offset, t.length))
        };
        // unknown cookie: the get was canceled, drop the chunk
        let Some((region, offset, length)) = target else {
            return Ok(());
        };
        if at + chunk.len() > length {
            return Err(Stop::Protocol);
        }
        region.write_at(offset + at, chunk);
        let mut st = self.shared.state.lock();
        if let Some(t) = st.pending.get_mut(&token).and_then(|p| p.transfer.as_mut()) {
            t.received += chunk.len();
        }
        Ok(())
    }

    fn bulk_ack(&mut self, payload: &[u8]) -> std::result::Result<(), Stop> {
        let cookie = u64::from_le_bytes(payload[0..8].try_into().unwrap());
        let remote = NalStatus::from_u8(payload[8]).ok_or(Stop::Protocol)?;
        let token = OpToken(cookie);
        let mut st = self.shared.state.lock();
        let status = match st.pending.get(&token) {
            None => return Ok(()),
            Some(p) => match (&p.transfer, p.kind) {
                (_, _) if !remote.is_ok() => remote,
                (Some(t), OpKind::Get) if t.received != t.length => NalStatus::TransportError,
                _ => NalStatus::Ok,
            },
        };
        self.shared.complete_locked(&mut st, token, status);
        Ok(())
    }
}

pub struct TcpTransport {
    shared: Arc<Shared>,
}

/// Opens a TCP endpoint listening on `host:port` (port 0 picks one), or an
/// origin-only endpoint when `locator` is `None`.
pub fn listen(locator: Option<&str>, config: &NalConfig) -> Result<Endpoint> {
    let (listener, address) = match locator {
        Some(loc) => {
            let listener = TcpListener::bind(loc).map_err(|e| NalError::BindFailed(format!("{loc}: {e}")))?;
            let local = listener
                .local_addr()
                .map_err(|e| NalError::BindFailed(e.to_string()))?;
            listener
                .set_nonblocking(true)
                .map_err(|e| NalError::BindFailed(e.to_string()))?;
            (Some(listener), Some(NetAddress::new(PLUGIN, local.to_string())))
        }
        None => (None, None),
    };
    let stats = Arc::new(NalStats::default());
    let shared = Arc::new(Shared {
        address: address.clone(),
        config: config.clone(),
        stats: stats.clone(),
        state: Mutex::new(State {
            open: true,
            ..State::default()
        }),
        wake: Condvar::new(),
        regions: RwLock::new(HashMap::new()),
        next_key: AtomicU64::new(1),
        next_token: AtomicU64::new(1),
        next_conn: AtomicU64::new(1),
    });
    if let Some(listener) = listener {
        let s = shared.clone();
        thread::Builder::new()
            .name("tcp-accept".into())
            .spawn(move || accept_loop(s, listener))
            .expect("spawn accept thread");
    }
    Ok(Endpoint::new(
        PLUGIN,
        address,
        config.clone(),
        stats,
        Box::new(TcpTransport { shared }),
    ))
}

impl Transport for TcpTransport {
    fn send_unexpected(&self, dest: &NetAddress, msg: Vec<u8>, tag: Tag) -> Result<OpToken> {
        self.shared.submit(dest, OpKind::Send, tag, None, move |token| Outgoing::Frame {
            bytes: msg,
            token: Some(token),
        })
    }

    fn recv_unexpected(&self) -> Result<Option<NalCompletion>> {
        let mut st = self.shared.state.lock();
        if !st.open {
            return Err(NalError::Closed);
        }
        Ok(st.unexpected.pop_front())
    }

    fn mem_expose(&self, region: MemRegion, perm: Permission) -> Result<MemoryKey> {
        if !self.shared.state.lock().open {
            return Err(NalError::Closed);
        }
        let key = MemoryKey(self.shared.next_key.fetch_add(1, Ordering::SeqCst));
        self.shared.regions.write().insert(key, (region, perm));
        Ok(key)
    }

    fn mem_unexpose(&self, key: MemoryKey) -> Result<()> {
        self.shared
            .regions
            .write()
            .remove(&key)
            .map(|_| ())
            .ok_or(NalError::UnknownKey(key))
    }

    fn get(&self, op: RemoteAccess) -> Result<OpToken> {
        if op.length == 0 {
            return self.shared.complete_later(OpKind::Get, op.tag);
        }
        let transfer = Transfer {
            region: op.local.clone(),
            offset: op.local_offset,
            length: op.length,
            received: 0,
        };
        self.shared
            .submit(&op.remote, OpKind::Get, op.tag, Some(transfer), |token| {
                let req = BulkRequest {
                    key: op.key,
                    offset: op.remote_offset,
                    length: op.length as u64,
                    cookie: token.0,
                };
                Outgoing::Frame {
                    bytes: control_frame(MessageKind::BulkGet, token.0, &req.encode()),
                    token: None,
                }
            })
    }

    fn put(&self, op: RemoteAccess) -> Result<OpToken> {
        if op.length == 0 {
            return self.shared.complete_later(OpKind::Put, op.tag);
        }
        self.shared
            .submit(&op.remote, OpKind::Put, op.tag, None, |token| Outgoing::PutStream {
                request: BulkRequest {
                    key: op.key,
                    offset: op.remote_offset,
                    length: op.length as u64,
                    cookie: token.0,
                },
                region: op.local.clone(),
                offset: op.local_offset,
            })
    }

    fn progress(&self, timeout: Duration, out: &mut Vec<NalCompletion>) -> Result<usize> {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.state.lock();
        loop {
            if !st.open {
                return Err(NalError::Closed);
            }
            let n = st.completions.len() + st.arrivals;
            if n > 0 {
                st.arrivals = 0;
                out.append(&mut st.completions);
                return Ok(n);
            }
            if Instant::now() >= deadline {
                return Ok(0);
            }
            self.shared.wake.wait_until(&mut st, deadline);
        }
    }

    fn cancel(&self, token: OpToken) -> Result<()> {
        let mut st = self.shared.state.lock();
        if self
            .shared
            .complete_locked(&mut st, token, NalStatus::Canceled)
        {
            Ok(())
        } else {
            Err(NalError::UnknownToken)
        }
    }

    fn close(&self) -> Vec<NalCompletion> {
        let mut st = self.shared.state.lock();
        if !st.open {
            return Vec::new();
        }
        st.open = false;
        let mut done = std::mem::take(&mut st.completions);
        for (token, p) in st.pending.drain() {
            done.push(NalCompletion::of(p.kind, NalStatus::Canceled, token, p.tag));
        }
        for (_, conn) in st.conns.drain() {
            if let Some(s) = conn.stream {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        st.routes.clear();
        st.unexpected.clear();
        drop(st);
        self.shared.regions.write().clear();
        self.shared.wake.notify_all();
        done
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.close();
    }
}
