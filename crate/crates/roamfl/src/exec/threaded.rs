use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use roamfl_core::protocol::Message;

use super::{ExecError, ExecOutcome};
use crate::roles::{Action, Event, Outbox, Role, RoleReport};
use crate::transport::{Listener, Receiver, Sender, Transport, TransportError};

const TICK: Duration = Duration::from_millis(50);
const ACCEPT_POLL: Duration = Duration::from_millis(2);

enum Inbound {
    Accepted {
        conn: u64,
        peer: String,
        sender: Sender,
    },
    Message {
        peer: String,
        msg: Message,
    },
    Closed {
        conn: u64,
        peer: String,
    },
    Failed {
        peer: String,
        error: TransportError,
    },
}

type Inbox = mpsc::Sender<Inbound>;

/// Set-once record of the first failure, shared by every thread.
#[derive(Clone, Default)]
struct Abort {
    flag: Arc<AtomicBool>,
    error: Arc<Mutex<Option<ExecError>>>,
}

impl Abort {
    fn fail(&self, e: ExecError) {
        let mut slot = self.error.lock().expect("abort lock");
        if slot.is_none() {
            log::error!("{e}");
            *slot = Some(e);
        }
        self.flag.store(true, Ordering::SeqCst);
    }

    fn raised(&self) -> bool {
        self.flag.load(Ordering::SeqCst)
    }
}

fn spawn_reader(conn: u64, peer: String, mut rx: Receiver, inbox: Inbox) {
    thread::spawn(move || loop {
        let item = match rx.recv() {
            Ok(Some(msg)) => Inbound::Message {
                peer: peer.clone(),
                msg,
            },
            Ok(None) => Inbound::Closed {
                conn,
                peer: peer.clone(),
            },
            Err(error) => Inbound::Failed {
                peer: peer.clone(),
                error,
            },
        };
        let last = !matches!(item, Inbound::Message { .. });
        if inbox.send(item).is_err() || last {
            return;
        }
    });
}

fn spawn_acceptor(
    role: String,
    mut listener: Box<dyn Listener>,
    inbox: Inbox,
    ids: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
) {
    thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            let conn = match listener.try_accept() {
                Ok(Some(c)) => c,
                Ok(None) => {
                    thread::sleep(ACCEPT_POLL);
                    continue;
                }
                Err(error) => {
                    let _ = inbox.send(Inbound::Failed {
                        peer: format!("{role} listener"),
                        error,
                    });
                    return;
                }
            };
            let inbox = inbox.clone();
            let conn_id = ids.fetch_add(1, Ordering::SeqCst);
            // The handshake read happens off the acceptor so a silent client cannot stall it.
            thread::spawn(move || {
                let (sender, mut rx) = conn.split();
                match rx.recv() {
                    Ok(Some(Message::Register(r))) => {
                        let peer = r.id.clone();
                        if inbox
                            .send(Inbound::Accepted {
                                conn: conn_id,
                                peer: peer.clone(),
                                sender,
                            })
                            .is_err()
                        {
                            return;
                        }
                        if inbox
                            .send(Inbound::Message {
                                peer: peer.clone(),
                                msg: Message::Register(r),
                            })
                            .is_ok()
                        {
                            spawn_reader(conn_id, peer, rx, inbox);
                        }
                    }
                    Ok(Some(other)) => {
                        log::warn!("dropping connection that opened with {}", other.tag())
                    }
                    Ok(None) => {}
                    Err(e) => log::warn!("dropping connection: {e}"),
                }
            });
        }
    });
}

struct Worker {
    role: Box<dyn Role>,
    transport: Arc<dyn Transport>,
    inbox_tx: Inbox,
    inbox: mpsc::Receiver<Inbound>,
    senders: BTreeMap<String, (u64, Sender)>,
    ids: Arc<AtomicU64>,
    abort: Abort,
    stop: Arc<AtomicBool>,
    finished: bool,
}

impl Worker {
    fn id(&self) -> String {
        self.role.id().to_string()
    }

    fn deliver(&mut self, event: Event) -> Result<(), ExecError> {
        let mut events = VecDeque::from([event]);
        while let Some(event) = events.pop_front() {
            if self.finished {
                return Ok(());
            }
            let mut out = Outbox::new();
            self.role.handle(event, &mut out)?;
            let id = self.id();
            for action in out.drain() {
                match action {
                    Action::Connect { peer, hello } => match self.transport.connect(&id, &peer) {
                        Ok(mut conn) => {
                            conn.send(&hello).map_err(|source| ExecError::Transport {
                                role: id.clone(),
                                source,
                            })?;
                            let conn_id = self.ids.fetch_add(1, Ordering::SeqCst);
                            let (sender, rx) = conn.split();
                            spawn_reader(conn_id, peer.clone(), rx, self.inbox_tx.clone());
                            if let Some((_, mut old)) = self.senders.insert(peer, (conn_id, sender))
                            {
                                old.close();
                            }
                        }
                        Err(e) => events.push_back(Event::ConnectFailed {
                            peer,
                            error: e.to_string(),
                        }),
                    },
                    Action::Send { peer, msg } => {
                        let (_, s) =
                            self.senders
                                .get_mut(&peer)
                                .ok_or_else(|| ExecError::NotConnected {
                                    role: id.clone(),
                                    peer: peer.clone(),
                                })?;
                        s.send(&msg).map_err(|source| ExecError::Transport {
                            role: id.clone(),
                            source,
                        })?;
                    }
                    Action::Disconnect { peer } => {
                        if let Some((_, mut s)) = self.senders.remove(&peer) {
                            s.close();
                        }
                    }
                    Action::Finish => {
                        self.finished = true;
                    }
                }
            }
        }
        Ok(())
    }

    fn on_inbound(&mut self, item: Inbound) -> Result<(), ExecError> {
        match item {
            Inbound::Accepted { conn, peer, sender } => {
                if let Some((_, mut old)) = self.senders.insert(peer, (conn, sender)) {
                    old.close();
                }
                Ok(())
            }
            Inbound::Message { peer, msg } => self.deliver(Event::Message { from: peer, msg }),
            Inbound::Closed { conn, peer } => {
                if self.senders.get(&peer).is_some_and(|(c, _)| *c == conn) {
                    self.senders.remove(&peer);
                    return self.deliver(Event::Disconnected { peer });
                }
                Ok(())
            }
            Inbound::Failed { peer, error } => Err(ExecError::Transport {
                role: format!("{} <- {peer}", self.id()),
                source: error,
            }),
        }
    }

    fn run(&mut self) -> Result<(), ExecError> {
        self.deliver(Event::Start)?;
        while !self.finished {
            if self.abort.raised() {
                return Ok(());
            }
            let deadline = self.role.poll_timeout();
            let wait = deadline.map_or(TICK, |d| {
                d.saturating_duration_since(Instant::now()).min(TICK)
            });
            match self.inbox.recv_timeout(wait) {
                Ok(item) => self.on_inbound(item)?,
                Err(RecvTimeoutError::Timeout) => {
                    if deadline.is_some_and(|d| Instant::now() >= d) {
                        self.deliver(Event::Timeout)?;
                    }
                }
                Err(RecvTimeoutError::Disconnected) => unreachable!("worker holds an inbox sender"),
            }
        }
        Ok(())
    }

    fn shut(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for (_, (_, mut s)) in std::mem::take(&mut self.senders) {
            s.close();
        }
    }
}

/// Runs each role on its own thread, with a reader thread per connection.
pub fn run_threaded(roles: Vec<Box<dyn Role>>, transport: Arc<dyn Transport>) -> ExecOutcome {
    let abort = Abort::default();
    let ids = Arc::new(AtomicU64::new(1));
    let mut workers = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for role in roles {
        let id = role.id().to_string();
        if !seen.insert(id.clone()) {
            abort.fail(ExecError::Setup(format!("duplicate role id {id}")));
            continue;
        }
        let (inbox_tx, inbox) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        if role.listens() {
            match transport.listen(&id) {
                Ok(l) => spawn_acceptor(id.clone(), l, inbox_tx.clone(), ids.clone(), stop.clone()),
                Err(source) => abort.fail(ExecError::Transport {
                    role: id.clone(),
                    source,
                }),
            }
        }
        workers.push(Worker {
            role,
            transport: transport.clone(),
            inbox_tx,
            inbox,
            senders: BTreeMap::new(),
            ids: ids.clone(),
            abort: abort.clone(),
            stop,
            finished: false,
        });
    }
    if abort.raised() {
        return ExecOutcome {
            reports: workers.iter().map(|w| (w.id(), w.role.report())).collect(),
            error: abort.error.lock().expect("abort lock").take(),
            trace: Vec::new(),
        };
    }
    let handles: Vec<thread::JoinHandle<(String, RoleReport)>> = workers
        .into_iter()
        .map(|mut w| {
            let name = w.id();
            thread::Builder::new()
                .name(name)
                .spawn(move || {
                    if let Err(e) = w.run() {
                        w.abort.fail(e);
                    }
                    w.shut();
                    (w.id(), w.role.report())
                })
                .expect("spawn role thread")
        })
        .collect();
    let mut reports = BTreeMap::new();
    for h in handles {
        match h.join() {
            Ok((id, r)) => {
                reports.insert(id, r);
            }
            Err(_) => abort.fail(ExecError::Setup("a role thread panicked".into())),
        }
    }
    let error = abort.error.lock().expect("abort lock").take();
    ExecOutcome {
        reports,
        error,
        trace: Vec::new(),
    }
}
