//! Executors drive role state machines over a [`Transport`].
//!
//! [`Transport`]: crate::transport::Transport

mod cooperative;
mod threaded;

use std::collections::BTreeMap;

use roamfl_core::protocol::Tag;

use crate::roles::{RoleError, RoleReport};
use crate::transport::TransportError;

pub use cooperative::run_cooperative;
pub use threaded::run_threaded;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Role(#[from] RoleError),
    #[error("{role}: {source}")]
    Transport {
        role: String,
        source: TransportError,
    },
    #[error("{role}: no connection to {peer}")]
    NotConnected { role: String, peer: String },
    #[error("{role}: {detail}")]
    Handshake { role: String, detail: String },
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("{0}")]
    Setup(String),
}

/// One delivered message, as recorded by the cooperative executor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub from: String,
    pub to: String,
    pub tag: Tag,
    pub round: Option<u32>,
}

/// Reports of every role plus the first error, if the run failed.
#[derive(Debug, Default)]
pub struct ExecOutcome {
    pub reports: BTreeMap<String, RoleReport>,
    pub error: Option<ExecError>,
    pub trace: Vec<Delivery>,
}
