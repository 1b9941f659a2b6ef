//! Two-party message channel.
//!
//! Every protocol round is one synchronized bidirectional exchange. Messages
//! carry a fingerprint of the operation tag and a per-channel sequence number
//! so that parties which drift out of step fail fast with a desync error
//! instead of silently combining unrelated payloads.
//!
//! Wire frame (bit-exact):
//!
//! ```text
//! +----------------+----------+------------------------------------------+
//! | length: u32 LE | type: u8 | payload: 8-byte LE words                 |
//! +----------------+----------+------------------------------------------+
//! length = payload bytes + 1
//! payload[0] = (tag fingerprint << 32) | sequence number
//! payload[1..] = ring elements
//! ```

mod ledger;

pub use ledger::{
    simulated_time, CostLedger, CostRow, CostTable, NetworkModel, RevealEntry, RevealKind, RevealLog, RoundRecord,
    TagCost, SELECTION_REVEALS,
};

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{Error, Result};

pub const MSG_EXCHANGE: u8 = 0x01;

/// Frames above this size are treated as corruption.
pub const MAX_FRAME_BYTES: u32 = 1 << 30;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub tag: u32,
    pub seq: u32,
    pub words: Vec<u64>,
}

/// 32-bit FNV-1a of an operation tag.
pub fn tag_fingerprint(tag: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in tag.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let payload_bytes = 8 * (msg.words.len() + 1);
    let mut out = Vec::with_capacity(5 + payload_bytes);
    out.extend_from_slice(&((payload_bytes + 1) as u32).to_le_bytes());
    out.push(MSG_EXCHANGE);
    let header = ((msg.tag as u64) << 32) | msg.seq as u64;
    out.extend_from_slice(&header.to_le_bytes());
    for w in &msg.words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

fn decode_body(msg_type: u8, payload: &[u8]) -> Result<Message> {
    if msg_type != MSG_EXCHANGE {
        return Err(Error::Frame(format!("unknown message type {msg_type:#04x}")));
    }
    if payload.len() < 8 || !payload.len().is_multiple_of(8) {
        return Err(Error::Frame(format!(
            "payload of {} bytes is not a whole number of words",
            payload.len()
        )));
    }
    let mut words = payload
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let header = words.next().expect("header word");
    Ok(Message {
        tag: (header >> 32) as u32,
        seq: header as u32,
        words: words.collect(),
    })
}

pub fn decode_frame(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < 5 {
        return Err(Error::Frame("truncated frame header".into()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len == 0 || bytes.len() != 4 + len {
        return Err(Error::Frame(format!(
            "length field {len} disagrees with frame size {}",
            bytes.len()
        )));
    }
    decode_body(bytes[4], &bytes[5..])
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Message> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|e| Error::Transport(format!("reading frame length: {e}")))?;
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_FRAME_BYTES {
        return Err(Error::Frame(format!("implausible frame length {len}")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)
        .map_err(|e| Error::Transport(format!("reading frame body: {e}")))?;
    decode_body(body[0], &body[1..])
}

pub trait Transport: Send {
    fn send(&mut self, msg: Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
}

/// In-process channel endpoint.
pub struct Loopback {
    tx: Sender<Message>,
    rx: Receiver<Message>,
}

pub fn loopback_pair() -> (Loopback, Loopback) {
    let (tx0, rx1) = channel();
    let (tx1, rx0) = channel();
    (Loopback { tx: tx0, rx: rx0 }, Loopback { tx: tx1, rx: rx1 })
}

impl Transport for Loopback {
    fn send(&mut self, msg: Message) -> Result<()> {
        self.tx.send(msg).map_err(|_| Error::Transport("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<Message> {
        self.rx.recv().map_err(|_| Error::Transport("peer hung up".into()))
    }
}

/// Framed stream-socket endpoint.
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(TcpTransport {
            reader,
            writer: BufWriter::new(stream),
        })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        Self::from_stream(TcpStream::connect(addr)?)
    }

    pub fn accept(listener: &TcpListener) -> Result<Self> {
        let (stream, _) = listener.accept()?;
        Self::from_stream(stream)
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: Message) -> Result<()> {
        self.writer
            .write_all(&encode_frame(&msg))
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Transport(format!("socket write: {e}")))
    }

    fn recv(&mut self) -> Result<Message> {
        read_frame(&mut self.reader)
    }
}

/// Two connected endpoints over a localhost socket.
pub fn tcp_pair() -> Result<(TcpTransport, TcpTransport)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let client = std::thread::spawn(move || TcpTransport::connect(addr));
    let server = TcpTransport::accept(&listener)?;
    let client = client
        .join()
        .map_err(|_| Error::Transport("connect thread panicked".into()))??;
    Ok((server, client))
}
