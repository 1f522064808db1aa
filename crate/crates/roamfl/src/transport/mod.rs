//! Framed, ordered, reliable message delivery between endpoints.
//!
//! Both backends carry the same encoded frames: `mem` moves bytes through
//! in-process pipes, `tcp` through loopback or LAN sockets (optionally
//! shaped to a bandwidth and latency).

mod mem;
mod schedule;
mod shaper;
mod tcp;

use std::io;

use roamfl_core::protocol::{Codec, DecodeError, EncodeError, Message};

pub use mem::MemTransport;
pub use schedule::{MobilitySchedule, MoveEvent};
pub use shaper::{LinkShaper, TokenBucket, BURST_BYTES};
pub use tcp::{AddressBook, LinkConfig, TcpTransport};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("cannot reach {peer}: {detail}")]
    Unreachable { peer: String, detail: String },
    #[error("cannot listen as {id}: {detail}")]
    Listen { id: String, detail: String },
    #[error("connection closed mid-frame ({buffered} bytes buffered)")]
    ClosedMidFrame { buffered: usize },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Outcome of a non-blocking read.
#[derive(Debug)]
pub enum Poll<T> {
    Ready(T),
    Pending,
    /// Peer closed cleanly at a frame boundary.
    Closed,
}

/// Outcome of a blocking read of raw bytes.
pub enum ReadOutcome {
    Data,
    WouldBlock,
    Eof,
}

/// Receiving half of a byte stream.
pub trait ByteSource: Send {
    /// Appends available bytes to `buf`. With `block`, waits for at least one byte or EOF.
    fn read_into(&mut self, buf: &mut Vec<u8>, block: bool) -> io::Result<ReadOutcome>;
}

/// Sending half of a byte stream.
pub trait ByteSink: Send {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()>;
    /// Ends the stream; the peer sees EOF after buffered bytes.
    fn close(&mut self);
}

/// Frame encoder over a [`ByteSink`].
pub struct Sender {
    sink: Box<dyn ByteSink>,
    codec: Codec,
    bytes_sent: u64,
}

impl Sender {
    pub fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        let bytes = self.codec.encode(msg)?;
        self.sink.write_all(&bytes)?;
        self.bytes_sent += bytes.len() as u64;
        Ok(())
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn close(&mut self) {
        self.sink.close();
    }
}

/// Frame decoder over a [`ByteSource`].
pub struct Receiver {
    source: Box<dyn ByteSource>,
    codec: Codec,
    buf: Vec<u8>,
    bytes_received: u64,
    eof: bool,
}

impl Receiver {
    fn take_frame(&mut self) -> Result<Option<Message>, TransportError> {
        match self.codec.decode(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                self.bytes_received += used as u64;
                Ok(Some(msg))
            }
            Err(DecodeError::Incomplete { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn at_eof(&self) -> Result<Poll<Message>, TransportError> {
        if self.buf.is_empty() {
            Ok(Poll::Closed)
        } else {
            Err(TransportError::ClosedMidFrame {
                buffered: self.buf.len(),
            })
        }
    }

    fn poll(&mut self, block: bool) -> Result<Poll<Message>, TransportError> {
        loop {
            if let Some(msg) = self.take_frame()? {
                return Ok(Poll::Ready(msg));
            }
            if self.eof {
                return self.at_eof();
            }
            match self.source.read_into(&mut self.buf, block)? {
                ReadOutcome::Data => {}
                ReadOutcome::WouldBlock => return Ok(Poll::Pending),
                ReadOutcome::Eof => self.eof = true,
            }
        }
    }

    /// Blocks until a frame arrives; `None` on clean close.
    pub fn recv(&mut self) -> Result<Option<Message>, TransportError> {
        match self.poll(true)? {
            Poll::Ready(m) => Ok(Some(m)),
            Poll::Closed => Ok(None),
            Poll::Pending => unreachable!("blocking read returned without data"),
        }
    }

    pub fn try_recv(&mut self) -> Result<Poll<Message>, TransportError> {
        self.poll(false)
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }
}

/// One end of an established connection.
pub struct Connection {
    pub sender: Sender,
    pub receiver: Receiver,
}

impl Connection {
    pub fn new(sink: Box<dyn ByteSink>, source: Box<dyn ByteSource>, codec: Codec) -> Self {
        Self {
            sender: Sender {
                sink,
                codec,
                bytes_sent: 0,
            },
            receiver: Receiver {
                source,
                codec,
                buf: Vec::new(),
                bytes_received: 0,
                eof: false,
            },
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        self.sender.send(msg)
    }

    pub fn recv(&mut self) -> Result<Option<Message>, TransportError> {
        self.receiver.recv()
    }

    pub fn try_recv(&mut self) -> Result<Poll<Message>, TransportError> {
        self.receiver.try_recv()
    }

    pub fn close(&mut self) {
        self.sender.close();
    }

    pub fn split(self) -> (Sender, Receiver) {
        (self.sender, self.receiver)
    }
}

/// Accepts incoming connections for one endpoint.
pub trait Listener: Send {
    /// Returns a pending connection if one is waiting.
    fn try_accept(&mut self) -> Result<Option<Connection>, TransportError>;
}

/// A way of reaching endpoints by id.
pub trait Transport: Send + Sync {
    fn listen(&self, id: &str) -> Result<Box<dyn Listener>, TransportError>;
    fn connect(&self, from: &str, to: &str) -> Result<Connection, TransportError>;
}
