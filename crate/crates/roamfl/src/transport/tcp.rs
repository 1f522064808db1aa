use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use roamfl_core::protocol::Codec;

use super::{
    ByteSink, ByteSource, Connection, LinkShaper, Listener, ReadOutcome, Transport, TransportError,
};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
/// Read timeout standing in for a non-blocking read. A real non-blocking
/// flag would be shared with the writing half of the socket.
const POLL_READ: Duration = Duration::from_millis(1);

/// Endpoint id to socket address. Listening on port 0 records the bound port.
#[derive(Clone, Debug, Default)]
pub struct AddressBook(Arc<Mutex<BTreeMap<String, String>>>);

impl AddressBook {
    pub fn new<I: IntoIterator<Item = (String, String)>>(entries: I) -> Self {
        Self(Arc::new(Mutex::new(entries.into_iter().collect())))
    }

    pub fn insert(&self, id: &str, addr: String) {
        self.0
            .lock()
            .expect("address book lock")
            .insert(id.to_string(), addr);
    }

    pub fn get(&self, id: &str) -> Option<String> {
        self.0.lock().expect("address book lock").get(id).cloned()
    }
}

#[derive(Clone, Debug, Default)]
pub struct LinkConfig {
    pub bits_per_sec: Option<f64>,
    pub latency: Duration,
}

#[derive(Clone)]
pub struct TcpTransport {
    book: AddressBook,
    codec: Codec,
    link: LinkConfig,
}

impl TcpTransport {
    pub fn new(book: AddressBook, codec: Codec, link: LinkConfig) -> Self {
        Self { book, codec, link }
    }

    pub fn book(&self) -> &AddressBook {
        &self.book
    }

    fn wrap(&self, stream: TcpStream) -> io::Result<Connection> {
        stream.set_nodelay(true)?;
        stream.set_nonblocking(false)?;
        let reader = stream.try_clone()?;
        let sink: Box<dyn ByteSink> = Box::new(TcpSink(stream));
        let sink: Box<dyn ByteSink> =
            if self.link.bits_per_sec.is_some() || !self.link.latency.is_zero() {
                Box::new(LinkShaper::new(
                    sink,
                    self.link.bits_per_sec,
                    self.link.latency,
                ))
            } else {
                sink
            };
        Ok(Connection::new(
            sink,
            Box::new(TcpSource {
                stream: reader,
                polling: None,
                scratch: vec![0; 64 * 1024],
            }),
            self.codec,
        ))
    }
}

struct TcpSink(TcpStream);

impl ByteSink for TcpSink {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.write_all(bytes)
    }

    fn close(&mut self) {
        let _ = self.0.shutdown(Shutdown::Write);
    }
}

impl Drop for TcpSink {
    /// The reading half holds a clone of the socket, so dropping alone would not end the stream.
    fn drop(&mut self) {
        self.close();
    }
}

struct TcpSource {
    stream: TcpStream,
    polling: Option<bool>,
    scratch: Vec<u8>,
}

impl ByteSource for TcpSource {
    fn read_into(&mut self, buf: &mut Vec<u8>, block: bool) -> io::Result<ReadOutcome> {
        if self.polling != Some(!block) {
            self.stream
                .set_read_timeout(if block { None } else { Some(POLL_READ) })?;
            self.polling = Some(!block);
        }
        loop {
            match self.stream.read(&mut self.scratch) {
                Ok(0) => return Ok(ReadOutcome::Eof),
                Ok(n) => {
                    buf.extend_from_slice(&self.scratch[..n]);
                    return Ok(ReadOutcome::Data);
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e)
                    if !block
                        && matches!(
                            e.kind(),
                            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                        ) =>
                {
                    return Ok(ReadOutcome::WouldBlock)
                }
                Err(e) if e.kind() == io::ErrorKind::ConnectionReset => {
                    return Ok(ReadOutcome::Eof)
                }
                Err(e) => return Err(e),
            }
        }
    }
}

struct TcpAcceptor {
    listener: TcpListener,
    transport: TcpTransport,
}

impl Listener for TcpAcceptor {
    fn try_accept(&mut self) -> Result<Option<Connection>, TransportError> {
        match self.listener.accept() {
            Ok((stream, _)) => Ok(Some(self.transport.wrap(stream)?)),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

impl Transport for TcpTransport {
    fn listen(&self, id: &str) -> Result<Box<dyn Listener>, TransportError> {
        let addr = self.book.get(id).unwrap_or_else(|| "127.0.0.1:0".into());
        let err = |e: io::Error| TransportError::Listen {
            id: id.into(),
            detail: format!("{addr}: {e}"),
        };
        let listener = TcpListener::bind(&addr).map_err(err)?;
        listener.set_nonblocking(true).map_err(err)?;
        let bound = listener.local_addr().map_err(err)?;
        self.book.insert(id, bound.to_string());
        Ok(Box::new(TcpAcceptor {
            listener,
            transport: self.clone(),
        }))
    }

    fn connect(&self, _from: &str, to: &str) -> Result<Connection, TransportError> {
        let unreachable = |detail: String| TransportError::Unreachable {
            peer: to.into(),
            detail,
        };
        let addr = self
            .book
            .get(to)
            .ok_or_else(|| unreachable("no address".into()))?;
        let targets: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| unreachable(format!("{addr}: {e}")))?
            .collect();
        let mut last = format!("{addr}: no usable address");
        for target in targets {
            match TcpStream::connect_timeout(&target, CONNECT_TIMEOUT) {
                Ok(stream) => return self.wrap(stream).map_err(TransportError::from),
                Err(e) => last = format!("{target}: {e}"),
            }
        }
        Err(unreachable(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Poll;
    use roamfl_core::protocol::Message;

    fn accept(l: &mut Box<dyn Listener>) -> Connection {
        loop {
            if let Some(c) = l.try_accept().unwrap() {
                return c;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    #[test]
    fn loopback_frames_and_clean_close() {
        let t = TcpTransport::new(
            AddressBook::default(),
            Codec::default(),
            LinkConfig::default(),
        );
        let mut l = t.listen("e1").unwrap();
        assert!(t.book().get("e1").unwrap().starts_with("127.0.0.1:"));
        let mut c = t.connect("d1", "e1").unwrap();
        let mut s = accept(&mut l);
        assert!(matches!(s.try_recv().unwrap(), Poll::Pending));
        c.send(&Message::Shutdown).unwrap();
        assert_eq!(s.recv().unwrap(), Some(Message::Shutdown));
        c.close();
        assert_eq!(s.recv().unwrap(), None);
    }

    #[test]
    fn unknown_and_refused_peers_are_unreachable() {
        let t = TcpTransport::new(
            AddressBook::default(),
            Codec::default(),
            LinkConfig::default(),
        );
        assert!(matches!(
            t.connect("d1", "e1"),
            Err(TransportError::Unreachable { .. })
        ));
        // Bind then drop to find a port nobody listens on.
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        t.book().insert("e2", format!("127.0.0.1:{port}"));
        assert!(matches!(
            t.connect("d1", "e2"),
            Err(TransportError::Unreachable { .. })
        ));
    }
}
