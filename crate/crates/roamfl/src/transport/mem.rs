use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::sync::{Arc, Condvar, Mutex};

use roamfl_core::protocol::Codec;

use super::{ByteSink, ByteSource, Connection, Listener, ReadOutcome, Transport, TransportError};

#[derive(Default)]
struct PipeState {
    bytes: VecDeque<u8>,
    closed: bool,
}

#[derive(Default)]
struct Pipe {
    state: Mutex<PipeState>,
    ready: Condvar,
}

struct PipeWriter(Arc<Pipe>);
struct PipeReader(Arc<Pipe>);

impl ByteSink for PipeWriter {
    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut s = self.0.state.lock().expect("pipe lock");
        if s.closed {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe closed"));
        }
        s.bytes.extend(bytes);
        self.0.ready.notify_all();
        Ok(())
    }

    fn close(&mut self) {
        self.0.state.lock().expect("pipe lock").closed = true;
        self.0.ready.notify_all();
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        self.close();
    }
}

impl ByteSource for PipeReader {
    fn read_into(&mut self, buf: &mut Vec<u8>, block: bool) -> io::Result<ReadOutcome> {
        let mut s = self.0.state.lock().expect("pipe lock");
        loop {
            if !s.bytes.is_empty() {
                buf.extend(s.bytes.drain(..));
                return Ok(ReadOutcome::Data);
            }
            if s.closed {
                return Ok(ReadOutcome::Eof);
            }
            if !block {
                return Ok(ReadOutcome::WouldBlock);
            }
            s = self.0.ready.wait(s).expect("pipe lock");
        }
    }
}

impl Drop for PipeReader {
    fn drop(&mut self) {
        // Writes after the reader is gone fail like a reset socket.
        let mut s = self.0.state.lock().expect("pipe lock");
        s.closed = true;
        s.bytes.clear();
    }
}

type Backlog = Arc<Mutex<VecDeque<Connection>>>;

/// In-process transport: endpoints are registry keys, connections are pairs
/// of byte pipes. Reads and writes never block on the other side being
/// scheduled, which lets a single thread drive every role.
#[derive(Clone)]
pub struct MemTransport {
    listeners: Arc<Mutex<BTreeMap<String, Backlog>>>,
    codec: Codec,
}

impl MemTransport {
    pub fn new(codec: Codec) -> Self {
        Self {
            listeners: Arc::default(),
            codec,
        }
    }

    /// Both ends of a fresh connection.
    pub fn pair(codec: Codec) -> (Connection, Connection) {
        let ab = Arc::new(Pipe::default());
        let ba = Arc::new(Pipe::default());
        let a = Connection::new(
            Box::new(PipeWriter(ab.clone())),
            Box::new(PipeReader(ba.clone())),
            codec,
        );
        let b = Connection::new(Box::new(PipeWriter(ba)), Box::new(PipeReader(ab)), codec);
        (a, b)
    }
}

impl Default for MemTransport {
    fn default() -> Self {
        Self::new(Codec::default())
    }
}

struct MemListener(Backlog);

impl Listener for MemListener {
    fn try_accept(&mut self) -> Result<Option<Connection>, TransportError> {
        Ok(self.0.lock().expect("backlog lock").pop_front())
    }
}

impl Transport for MemTransport {
    fn listen(&self, id: &str) -> Result<Box<dyn Listener>, TransportError> {
        let mut map = self.listeners.lock().expect("registry lock");
        if map.contains_key(id) {
            return Err(TransportError::Listen {
                id: id.into(),
                detail: "already registered".into(),
            });
        }
        let backlog = Backlog::default();
        map.insert(id.to_string(), backlog.clone());
        Ok(Box::new(MemListener(backlog)))
    }

    fn connect(&self, _from: &str, to: &str) -> Result<Connection, TransportError> {
        let backlog = self
            .listeners
            .lock()
            .expect("registry lock")
            .get(to)
            .cloned()
            .ok_or_else(|| TransportError::Unreachable {
                peer: to.into(),
                detail: "no such endpoint".into(),
            })?;
        let (near, far) = Self::pair(self.codec);
        backlog.lock().expect("backlog lock").push_back(far);
        Ok(near)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Poll;
    use roamfl_core::protocol::{Attach, Message, Register, RoleKind, FORMAT_VERSION};

    fn register() -> Message {
        Message::Register(Register {
            version: FORMAT_VERSION,
            role: RoleKind::Device,
            id: "d1".into(),
            attach: Attach::Fresh,
            completed_rounds: 0,
            replay_rounds: 0,
            shard_size: 10,
        })
    }

    #[test]
    fn connect_send_and_receive() {
        let t = MemTransport::default();
        let mut l = t.listen("e1").unwrap();
        let mut c = t.connect("d1", "e1").unwrap();
        c.send(&register()).unwrap();
        c.send(&Message::Shutdown).unwrap();
        let mut s = l.try_accept().unwrap().unwrap();
        assert_eq!(s.recv().unwrap(), Some(register()));
        assert_eq!(s.recv().unwrap(), Some(Message::Shutdown));
        assert!(matches!(s.try_recv().unwrap(), Poll::Pending));
        c.close();
        assert!(matches!(s.try_recv().unwrap(), Poll::Closed));
    }

    #[test]
    fn unknown_endpoint_is_unreachable() {
        let t = MemTransport::default();
        assert!(matches!(
            t.connect("d1", "e9"),
            Err(TransportError::Unreachable { .. })
        ));
        t.listen("e1").unwrap();
        assert!(t.listen("e1").is_err());
    }

    #[test]
    fn blocking_recv_wakes_on_write_from_another_thread() {
        let (mut a, mut b) = MemTransport::pair(Codec::default());
        let h = std::thread::spawn(move || b.recv().unwrap());
        std::thread::sleep(std::time::Duration::from_millis(20));
        a.send(&Message::Shutdown).unwrap();
        assert_eq!(h.join().unwrap(), Some(Message::Shutdown));
    }

    #[test]
    fn send_after_peer_dropped_fails() {
        let (mut a, b) = MemTransport::pair(Codec::default());
        drop(b);
        assert!(a.send(&Message::Shutdown).is_err());
    }
}
