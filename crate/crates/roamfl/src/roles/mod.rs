//! Device, edge and central server as I/O-free state machines.
//!
//! A role reacts to [`Event`]s by pushing [`Action`]s into an [`Outbox`];
//! an executor owns the connections and carries the actions out in order.
//! The first frame on every connection is a `Register` naming the sender,
//! and peers are addressed by that id from then on.

mod central;
mod device;
mod edge;
mod mobility;

use std::time::{Duration, Instant};

use roamfl_core::nn::{ModelSpec, ParamSet};
use roamfl_core::protocol::{Attach, Message, Register, RoleKind, FORMAT_VERSION};
use roamfl_core::session::SessionError;
use roamfl_core::split::{SplitError, SplitSpec};

use crate::metrics::MetricsRow;

pub use central::{fedavg_aggregate, Central, CentralConfig};
pub use device::{Device, DeviceConfig};
pub use edge::{Edge, EdgeConfig};
pub use mobility::{strategies, Departure, FedFly, MobilityStrategy, Restart};

#[derive(Debug, Clone)]
pub enum Event {
    Start,
    Message {
        from: String,
        msg: Message,
    },
    Disconnected {
        peer: String,
    },
    ConnectFailed {
        peer: String,
        error: String,
    },
    /// The deadline from [`Role::poll_timeout`] passed.
    Timeout,
}

#[derive(Debug, Clone)]
pub enum Action {
    /// Opens a connection and sends `hello` (a `Register`) as its first frame.
    Connect {
        peer: String,
        hello: Message,
    },
    Send {
        peer: String,
        msg: Message,
    },
    Disconnect {
        peer: String,
    },
    /// The role is done; its connections are closed after pending sends.
    Finish,
}

#[derive(Debug, Default)]
pub struct Outbox(Vec<Action>);

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn connect(&mut self, peer: &str, hello: Message) {
        self.0.push(Action::Connect {
            peer: peer.into(),
            hello,
        });
    }

    pub fn send(&mut self, peer: &str, msg: Message) {
        self.0.push(Action::Send {
            peer: peer.into(),
            msg,
        });
    }

    pub fn disconnect(&mut self, peer: &str) {
        self.0.push(Action::Disconnect { peer: peer.into() });
    }

    pub fn finish(&mut self) {
        self.0.push(Action::Finish);
    }

    pub fn drain(&mut self) -> std::vec::Drain<'_, Action> {
        self.0.drain(..)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RoleError {
    #[error("{role}: protocol error: {detail}")]
    Protocol { role: String, detail: String },
    #[error("{role}: {detail}")]
    Runtime { role: String, detail: String },
    #[error("{role}: timed out: {detail}")]
    Timeout { role: String, detail: String },
    #[error("{role}: {source}")]
    Session { role: String, source: SessionError },
    #[error("{role}: {source}")]
    Split { role: String, source: SplitError },
}

impl RoleError {
    pub(crate) fn protocol(role: &str, detail: impl Into<String>) -> Self {
        Self::Protocol {
            role: role.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn runtime(role: &str, detail: impl Into<String>) -> Self {
        Self::Runtime {
            role: role.into(),
            detail: detail.into(),
        }
    }
}

const REDIAL_INTERVAL: Duration = Duration::from_millis(200);
const REDIAL_ATTEMPTS: u32 = 50;

/// Retries the first connection of a role while its peer may still be starting.
#[derive(Debug, Clone)]
pub(crate) struct Redial {
    left: u32,
    at: Option<Instant>,
}

impl Default for Redial {
    fn default() -> Self {
        Self {
            left: REDIAL_ATTEMPTS,
            at: None,
        }
    }
}

impl Redial {
    /// Schedules another attempt; false once attempts are used up.
    pub(crate) fn schedule(&mut self) -> bool {
        if self.left == 0 {
            return false;
        }
        self.left -= 1;
        self.at = Some(Instant::now() + REDIAL_INTERVAL);
        true
    }

    pub(crate) fn due(&mut self) -> bool {
        if self.at.is_some_and(|t| Instant::now() >= t) {
            self.at = None;
            return true;
        }
        false
    }

    /// The peer answered; later failures are real.
    pub(crate) fn stop(&mut self) {
        self.left = 0;
        self.at = None;
    }

    pub(crate) fn deadline(&self) -> Option<Instant> {
        self.at
    }
}

/// Attaches the role id to lower-level errors.
pub(crate) trait Context<T> {
    fn ctx(self, role: &str) -> Result<T, RoleError>;
}

impl<T> Context<T> for Result<T, SessionError> {
    fn ctx(self, role: &str) -> Result<T, RoleError> {
        self.map_err(|source| RoleError::Session {
            role: role.into(),
            source,
        })
    }
}

impl<T> Context<T> for Result<T, SplitError> {
    fn ctx(self, role: &str) -> Result<T, RoleError> {
        self.map_err(|source| RoleError::Split {
            role: role.into(),
            source,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct CentralReport {
    pub rows: Vec<MetricsRow>,
    /// Test accuracy after each aggregation, starting with round 1.
    pub accuracy: Vec<f64>,
    pub final_params: Option<ParamSet>,
}

#[derive(Debug, Clone, Default)]
pub struct EdgeReport {
    pub checkpoints_sent: u32,
    pub checkpoints_restored: u32,
    /// Devices that trained at least one batch here.
    pub devices_served: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct DeviceReport {
    pub device_rounds: u64,
    pub moves: u32,
    pub overheads_s: Vec<f64>,
    /// Edge that served each round, in order.
    pub edges: Vec<String>,
}

#[derive(Debug, Clone)]
pub enum RoleReport {
    Central(CentralReport),
    Edge(EdgeReport),
    Device(DeviceReport),
}

pub trait Role: Send {
    fn id(&self) -> &str;
    fn kind(&self) -> RoleKind;
    fn handle(&mut self, event: Event, out: &mut Outbox) -> Result<(), RoleError>;
    /// When the role next wants a [`Event::Timeout`].
    fn poll_timeout(&self) -> Option<Instant> {
        None
    }
    fn report(&self) -> RoleReport;

    /// Central and edges accept connections; devices only dial out.
    fn listens(&self) -> bool {
        self.kind() != RoleKind::Device
    }
}

/// Training setup shared by every role.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub model: ModelSpec,
    pub split: SplitSpec,
    pub rounds: u32,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
}

pub(crate) fn hello(kind: RoleKind, id: &str) -> Message {
    Message::Register(Register {
        version: FORMAT_VERSION,
        role: kind,
        id: id.into(),
        attach: Attach::Fresh,
        completed_rounds: 0,
        replay_rounds: 0,
        shard_size: 0,
    })
}
