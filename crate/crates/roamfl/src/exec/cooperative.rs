use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use roamfl_core::protocol::Message;

use super::{Delivery, ExecError, ExecOutcome};
use crate::roles::{Action, Event, Outbox, Role};
use crate::transport::{Connection, Listener, Poll, Transport};

struct Conn {
    id: u64,
    /// Known once the first frame (a `Register`) has been read.
    peer: Option<String>,
    conn: Connection,
}

struct Slot {
    role: Box<dyn Role>,
    listener: Option<Box<dyn Listener>>,
    conns: Vec<Conn>,
    finished: bool,
}

impl Slot {
    /// Newest connection to `peer`; older ones are only drained.
    fn current(&mut self, peer: &str) -> Option<&mut Conn> {
        self.conns
            .iter_mut()
            .filter(|c| c.peer.as_deref() == Some(peer))
            .max_by_key(|c| c.id)
    }
}

struct Runner<'a> {
    transport: &'a dyn Transport,
    slots: BTreeMap<String, Slot>,
    next_conn: u64,
    trace: Vec<Delivery>,
}

impl Runner<'_> {
    fn deliver(&mut self, id: &str, event: Event) -> Result<(), ExecError> {
        let mut events = VecDeque::from([event]);
        while let Some(event) = events.pop_front() {
            let slot = self.slots.get_mut(id).expect("known role");
            if slot.finished {
                return Ok(());
            }
            let mut out = Outbox::new();
            slot.role.handle(event, &mut out)?;
            for action in out.drain() {
                match action {
                    Action::Connect { peer, hello } => match self.transport.connect(id, &peer) {
                        Ok(mut conn) => {
                            conn.send(&hello).map_err(|source| ExecError::Transport {
                                role: id.into(),
                                source,
                            })?;
                            self.next_conn += 1;
                            slot.conns.push(Conn {
                                id: self.next_conn,
                                peer: Some(peer),
                                conn,
                            });
                        }
                        Err(e) => events.push_back(Event::ConnectFailed {
                            peer,
                            error: e.to_string(),
                        }),
                    },
                    Action::Send { peer, msg } => {
                        let c = slot.current(&peer).ok_or_else(|| ExecError::NotConnected {
                            role: id.into(),
                            peer: peer.clone(),
                        })?;
                        c.conn.send(&msg).map_err(|source| ExecError::Transport {
                            role: id.into(),
                            source,
                        })?;
                    }
                    Action::Disconnect { peer } => {
                        slot.conns.retain_mut(|c| {
                            let keep = c.peer.as_deref() != Some(peer.as_str());
                            if !keep {
                                c.conn.close();
                            }
                            keep
                        });
                    }
                    Action::Finish => {
                        for c in &mut slot.conns {
                            c.conn.close();
                        }
                        slot.conns.clear();
                        slot.listener = None;
                        slot.finished = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// Accepts and reads at most one frame per connection of one role.
    fn poll_role(&mut self, id: &str) -> Result<bool, ExecError> {
        let mut progress = false;
        let slot = self.slots.get_mut(id).expect("known role");
        if let Some(l) = &mut slot.listener {
            while let Some(conn) = l.try_accept().map_err(|source| ExecError::Transport {
                role: id.into(),
                source,
            })? {
                self.next_conn += 1;
                slot.conns.push(Conn {
                    id: self.next_conn,
                    peer: None,
                    conn,
                });
                progress = true;
            }
        }
        let mut order: Vec<(String, u64)> = slot
            .conns
            .iter()
            .map(|c| (c.peer.clone().unwrap_or_default(), c.id))
            .collect();
        order.sort();
        for (_, conn_id) in order {
            let slot = self.slots.get_mut(id).expect("known role");
            if slot.finished {
                break;
            }
            let Some(pos) = slot.conns.iter().position(|c| c.id == conn_id) else {
                continue;
            };
            let c = &mut slot.conns[pos];
            let polled = c.conn.try_recv().map_err(|source| ExecError::Transport {
                role: id.into(),
                source,
            })?;
            match polled {
                Poll::Pending => {}
                Poll::Ready(msg) => {
                    progress = true;
                    let from = match (&c.peer, &msg) {
                        (Some(p), _) => p.clone(),
                        (None, Message::Register(r)) => {
                            c.peer = Some(r.id.clone());
                            r.id.clone()
                        }
                        (None, other) => {
                            return Err(ExecError::Handshake {
                                role: id.into(),
                                detail: format!(
                                    "connection opened with {} instead of Register",
                                    other.tag()
                                ),
                            })
                        }
                    };
                    self.trace.push(Delivery {
                        from: from.clone(),
                        to: id.into(),
                        tag: msg.tag(),
                        round: msg.round_hint(),
                    });
                    self.deliver(id, Event::Message { from, msg })?;
                }
                Poll::Closed => {
                    progress = true;
                    let c = slot.conns.remove(pos);
                    if let Some(peer) = c.peer {
                        // A newer connection from the same peer supersedes this one.
                        if !slot.conns.iter().any(|o| o.peer.as_deref() == Some(&peer)) {
                            self.deliver(id, Event::Disconnected { peer })?;
                        }
                    }
                }
            }
        }
        Ok(progress)
    }

    fn run(&mut self) -> Result<(), ExecError> {
        let ids: Vec<String> = self.slots.keys().cloned().collect();
        for id in &ids {
            self.deliver(id, Event::Start)?;
        }
        loop {
            let live: Vec<String> = ids
                .iter()
                .filter(|id| !self.slots[*id].finished)
                .cloned()
                .collect();
            if live.is_empty() {
                return Ok(());
            }
            let mut progress = false;
            for id in &live {
                progress |= self.poll_role(id)?;
            }
            if progress {
                continue;
            }
            let next = live
                .iter()
                .filter_map(|id| self.slots[id].role.poll_timeout().map(|t| (t, id.clone())))
                .min();
            match next {
                Some((at, id)) => {
                    std::thread::sleep(at.saturating_duration_since(Instant::now()));
                    self.deliver(&id, Event::Timeout)?;
                }
                None => {
                    return Err(ExecError::Deadlock(format!(
                        "no role can make progress; waiting: {}",
                        live.join(", ")
                    )))
                }
            }
        }
    }
}

/// Runs every role on the calling thread, polling roles and their
/// connections in id order. Delivery order depends only on the roles'
/// behaviour, so a run is reproducible.
pub fn run_cooperative(roles: Vec<Box<dyn Role>>, transport: &dyn Transport) -> ExecOutcome {
    let mut runner = Runner {
        transport,
        slots: BTreeMap::new(),
        next_conn: 0,
        trace: Vec::new(),
    };
    let mut setup_error = None;
    for role in roles {
        let id = role.id().to_string();
        let listener = if role.listens() {
            match transport.listen(&id) {
                Ok(l) => Some(l),
                Err(e) => {
                    setup_error.get_or_insert(ExecError::Transport {
                        role: id.clone(),
                        source: e,
                    });
                    None
                }
            }
        } else {
            None
        };
        if runner
            .slots
            .insert(
                id.clone(),
                Slot {
                    role,
                    listener,
                    conns: Vec::new(),
                    finished: false,
                },
            )
            .is_some()
        {
            setup_error.get_or_insert(ExecError::Setup(format!("duplicate role id {id}")));
        }
    }
    let error = match setup_error {
        Some(e) => Some(e),
        None => runner.run().err(),
    };
    ExecOutcome {
        reports: runner
            .slots
            .iter()
            .map(|(id, s)| (id.clone(), s.role.report()))
            .collect(),
        error,
        trace: runner.trace,
    }
}
