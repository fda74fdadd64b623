//! Length-prefixed TCP protocol for the cloud detector, a file-backed server
//! stub and the matching client.
//!
//! Every message is a 13-byte header (`MBY1`, type byte, frame id `u32`,
//! payload length `u32`, little-endian) followed by the payload.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::dataset::{CloudDetections, ScoredBox};
use crate::geometry::Box3D;

pub const MAGIC: [u8; 4] = *b"MBY1";
pub const HEADER_LEN: usize = 13;
pub const MAX_PAYLOAD: usize = 64 << 20;
pub const BOX_RECORD_LEN: usize = 32;

pub const ERR_NOFRAME: &str = "NOFRAME";
pub const ERR_BADMSG: &str = "BADMSG";

/// How long the server waits for the rest of a partially received header.
const PARTIAL_HEADER_TIMEOUT: Duration = Duration::from_secs(1);
const POLL_INTERVAL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    DetectRequest = 1,
    DetectResponse = 2,
    Error = 3,
}

impl MsgType {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::DetectRequest),
            2 => Some(Self::DetectResponse),
            3 => Some(Self::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0}")]
    BadType(u8),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("message truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad box payload: {0}")]
    BadPayload(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub frame_id: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: MsgType,
    pub frame_id: u32,
    pub payload_len: usize,
}

pub fn decode_header(bytes: &[u8]) -> Result<Header, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated { need: HEADER_LEN, have: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let msg_type = MsgType::from_byte(bytes[4]).ok_or(WireError::BadType(bytes[4]))?;
    let frame_id = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let payload_len = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(payload_len));
    }
    Ok(Header { msg_type, frame_id, payload_len })
}

impl WireMessage {
    pub fn new(msg_type: MsgType, frame_id: u32, payload: Vec<u8>) -> Self {
        Self { msg_type, frame_id, payload }
    }

    pub fn error(frame_id: u32, code: &str) -> Self {
        Self::new(MsgType::Error, frame_id, code.as_bytes().to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        assert!(self.payload.len() <= MAX_PAYLOAD, "payload exceeds wire limit");
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.frame_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one message from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), WireError> {
        let h = decode_header(bytes)?;
        let end = HEADER_LEN + h.payload_len;
        if bytes.len() < end {
            return Err(WireError::Truncated { need: end, have: bytes.len() });
        }
        Ok((Self::new(h.msg_type, h.frame_id, bytes[HEADER_LEN..end].to_vec()), end))
    }
}

pub fn read_message(r: &mut impl Read) -> Result<WireMessage, WireError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let h = decode_header(&header)?;
    let mut payload = vec![0u8; h.payload_len];
    r.read_exact(&mut payload)?;
    Ok(WireMessage::new(h.msg_type, h.frame_id, payload))
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

/// Box list payload: `u32` count, then x, y, z, l, w, h, theta, score as `f32`.
pub fn encode_boxes(boxes: &[ScoredBox]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + boxes.len() * BOX_RECORD_LEN);
    out.extend_from_slice(&(boxes.len() as u32).to_le_bytes());
    for sb in boxes {
        let b = &sb.bbox;
        let vals = [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.theta, sb.score];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_boxes(payload: &[u8], frame_id: u32) -> Result<CloudDetections, WireError> {
    if payload.len() < 4 {
        return Err(WireError::BadPayload("missing box count".into()));
    }
    let n = u32::from_le_bytes(payload[0..4].try_into().expect("4 bytes")) as usize;
    if payload.len() != 4 + n.saturating_mul(BOX_RECORD_LEN) {
        return Err(WireError::BadPayload(format!("{} bytes for {n} boxes", payload.len())));
    }
    let mut boxes = Vec::with_capacity(n);
    for rec in payload[4..].chunks_exact(BOX_RECORD_LEN) {
        let f: Vec<f64> =
            rec.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let bbox = Box3D::new([f[0], f[1], f[2]], [f[3], f[4], f[5]], f[6])
            .map_err(|e| WireError::BadPayload(e.to_string()))?;
        boxes.push(ScoredBox { bbox, score: f[7] });
    }
    Ok(CloudDetections { frame_id, boxes })
}

// ---------------------------------------------------------------------------
// Server

/// Running server; dropping it without [`ServerHandle::shutdown`] leaves it running.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits, e.g. after `shutdown` from another thread.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

struct Store {
    responses: BTreeMap<u32, Vec<u8>>,
    delay: Duration,
}

/// Binds `bind` and answers detection requests from `store`, sleeping
/// `inference_delay` before each response.
pub fn serve(
    bind: impl ToSocketAddrs,
    store: &BTreeMap<u32, CloudDetections>,
    inference_delay: Duration,
) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let responses = store
        .iter()
        .map(|(&f, det)| (f, WireMessage::new(MsgType::DetectResponse, f, encode_boxes(&det.boxes)).encode()))
        .collect();
    let store = Arc::new(Store { responses, delay: inference_delay });
    let stop = Arc::new(AtomicBool::new(false));
    let stop_accept = stop.clone();
    let accept = thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_accept.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let store = store.clone();
                    let stop = stop_accept.clone();
                    thread::spawn(move || {
                        if let Err(e) = handle_connection(stream, &store, &stop) {
                            log::debug!("connection ended: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });
    log::info!("cloud stub listening on {addr}");
    Ok(ServerHandle { addr, stop, accept: Some(accept) })
}

enum Fill {
    Full,
    /// Peer closed before sending anything.
    Closed,
    /// Peer closed or stalled mid-header.
    Partial,
    Stopped,
}

/// Reads exactly `buf.len()` bytes, polling so shutdown is noticed.
fn fill(stream: &mut TcpStream, buf: &mut [u8], stop: &AtomicBool) -> io::Result<Fill> {
    let mut got = 0;
    let mut first_byte_at: Option<Instant> = None;
    while got < buf.len() {
        if stop.load(Ordering::SeqCst) {
            return Ok(Fill::Stopped);
        }
        match stream.read(&mut buf[got..]) {
            Ok(0) => return Ok(if got == 0 { Fill::Closed } else { Fill::Partial }),
            Ok(n) => {
                got += n;
                first_byte_at.get_or_insert_with(Instant::now);
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if first_byte_at.is_some_and(|t| t.elapsed() > PARTIAL_HEADER_TIMEOUT) {
                    return Ok(Fill::Partial);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Fill::Full)
}

fn handle_connection(mut stream: TcpStream, store: &Store, stop: &AtomicBool) -> io::Result<()> {
    stream.set_read_timeout(Some(POLL_INTERVAL))?;
    stream.set_nodelay(true)?;
    let mut header = [0u8; HEADER_LEN];
    loop {
        match fill(&mut stream, &mut header, stop)? {
            Fill::Full => {}
            Fill::Closed | Fill::Stopped => return Ok(()),
            Fill::Partial => {
                write_message(&mut stream, &WireMessage::error(0, ERR_BADMSG))?;
                continue;
            }
        }
        let h = match decode_header(&header) {
            Ok(h) => h,
            Err(WireError::TooLarge(_)) => {
                // The payload cannot be skipped safely; answer and hang up.
                write_message(&mut stream, &WireMessage::error(0, ERR_BADMSG))?;
                let _ = stream.shutdown(Shutdown::Both);
                return Ok(());
            }
            Err(_) => {
                write_message(&mut stream, &WireMessage::error(0, ERR_BADMSG))?;
                continue;
            }
        };
        let mut payload = vec![0u8; h.payload_len];
        match fill(&mut stream, &mut payload, stop)? {
            Fill::Full => {}
            Fill::Closed | Fill::Stopped => return Ok(()),
            Fill::Partial => {
                write_message(&mut stream, &WireMessage::error(h.frame_id, ERR_BADMSG))?;
                continue;
            }
        }
        if h.msg_type != MsgType::DetectRequest {
            write_message(&mut stream, &WireMessage::error(h.frame_id, ERR_BADMSG))?;
            continue;
        }
        if !store.delay.is_zero() {
            thread::sleep(store.delay);
        }
        match store.responses.get(&h.frame_id) {
            Some(bytes) => {
                stream.write_all(bytes)?;
                stream.flush()?;
            }
            None => write_message(&mut stream, &WireMessage::error(h.frame_id, ERR_NOFRAME))?,
        }
    }
}

// ---------------------------------------------------------------------------
// Client

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {0}")]
    Server(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for ClientError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Self::Timeout,
            _ => Self::Io(e),
        }
    }
}

impl From<WireError> for ClientError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Io(io) => io.into(),
            other => Self::Protocol(other.to_string()),
        }
    }
}

/// One connection to the cloud detector; one request in flight at a time.
pub struct CloudClient {
    stream: TcpStream,
}

impl CloudClient {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, ClientError> {
        let mut last = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    return Ok(Self { stream });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.map_or_else(|| ClientError::Protocol("address resolved to nothing".into()), ClientError::from))
    }

    /// Sends the raw frame bytes and waits up to `timeout` for the boxes.
    /// After a timeout the connection should be discarded.
    pub fn request(
        &mut self,
        frame_id: u32,
        payload: &[u8],
        timeout: Duration,
    ) -> Result<CloudDetections, ClientError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(ClientError::Protocol(format!("payload of {} bytes exceeds limit", payload.len())));
        }
        self.stream.set_write_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        self.stream.set_read_timeout(Some(timeout.max(Duration::from_micros(1))))?;
        write_message(&mut self.stream, &WireMessage::new(MsgType::DetectRequest, frame_id, payload.to_vec()))?;
        let msg = read_message(&mut self.stream)?;
        match msg.msg_type {
            MsgType::DetectResponse if msg.frame_id == frame_id => Ok(decode_boxes(&msg.payload, frame_id)?),
            MsgType::DetectResponse => {
                Err(ClientError::Protocol(format!("response for frame {} to request {frame_id}", msg.frame_id)))
            }
            MsgType::Error => Err(ClientError::Server(String::from_utf8_lossy(&msg.payload).into_owned())),
            MsgType::DetectRequest => Err(ClientError::Protocol("server sent a request".into())),
        }
    }
}

pub fn request_detection(
    addr: impl ToSocketAddrs,
    frame_id: u32,
    payload: &[u8],
    timeout: Duration,
) -> Result<CloudDetections, ClientError> {
    CloudClient::connect(addr, timeout)?.request(frame_id, payload, timeout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame_id: u32, n: usize) -> CloudDetections {
        CloudDetections {
            frame_id,
            boxes: (0..n)
                .map(|i| ScoredBox {
                    bbox: Box3D::new([10.0 + i as f64, -2.5, -0.9], [3.9, 1.6, 1.56], 0.25).unwrap(),
                    score: 0.875,
                })
                .collect(),
        }
    }

    #[test]
    fn header_round_trip() {
        let m = WireMessage::new(MsgType::DetectRequest, 42, vec![1, 2, 3]);
        let bytes = m.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 3);
        assert_eq!(&bytes[..4], b"MBY1");
        assert_eq!(WireMessage::decode(&bytes).unwrap(), (m, 16));
    }

    #[test]
    fn decode_rejects_bad_input() {
        let mut bytes = WireMessage::new(MsgType::DetectResponse, 1, vec![]).encode();
        assert!(matches!(decode_header(&bytes[..5]), Err(WireError::Truncated { .. })));
        bytes[4] = 9;
        assert!(matches!(decode_header(&bytes), Err(WireError::BadType(9))));
        bytes[0] = b'X';
        assert!(matches!(decode_header(&bytes), Err(WireError::BadMagic(_))));
    }

    #[test]
    fn response_size() {
        assert_eq!(encode_boxes(&det(5, 2).boxes).len(), 4 + 2 * 32);
    }

    #[test]
    fn loopback_paths() {
        let store = BTreeMap::from([(5, det(5, 2))]);
        let server = serve("127.0.0.1:0", &store, Duration::ZERO).unwrap();
        let addr = server.local_addr();
        let got = request_detection(addr, 5, &[0u8; 64], Duration::from_secs(5)).unwrap();
        assert_eq!(got.boxes.len(), 2);
        assert!((got.boxes[0].bbox.center[0] - 10.0).abs() < 1e-6);
        match request_detection(addr, 6, &[], Duration::from_secs(5)) {
            Err(ClientError::Server(code)) => assert_eq!(code, ERR_NOFRAME),
            other => panic!("unexpected {other:?}"),
        }
        // Truncated header followed by a half-close.
        let mut s = TcpStream::connect(addr).unwrap();
        s.write_all(b"MBY1\x01").unwrap();
        s.shutdown(Shutdown::Write).unwrap();
        let msg = read_message(&mut s).unwrap();
        assert_eq!(msg.msg_type, MsgType::Error);
        assert_eq!(msg.payload, ERR_BADMSG.as_bytes());
        server.shutdown();
    }

    #[test]
    fn timeout_against_slow_server() {
        let store = BTreeMap::from([(1, det(1, 1))]);
        let server = serve("127.0.0.1:0", &store, Duration::from_millis(50)).unwrap();
        let r = request_detection(server.local_addr(), 1, &[], Duration::from_millis(1));
        assert!(matches!(r, Err(ClientError::Timeout)), "{r:?}");
        server.shutdown();
    }

    #[test]
    fn wrong_magic_in_response_is_protocol_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let _ = read_message(&mut s).unwrap();
            let mut bytes = WireMessage::new(MsgType::DetectResponse, 3, encode_boxes(&[])).encode();
            bytes[0..4].copy_from_slice(b"NOPE");
            s.write_all(&bytes).unwrap();
        });
        let r = request_detection(addr, 3, &[], Duration::from_secs(5));
        assert!(matches!(r, Err(ClientError::Protocol(_))), "{r:?}");
        t.join().unwrap();
    }
}
