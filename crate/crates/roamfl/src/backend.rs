//! Named transport plus executor pairs.

use std::sync::Arc;

use roamfl_core::protocol::Codec;

use crate::exec::{run_cooperative, run_threaded, ExecOutcome};
use crate::registry::Registry;
use crate::roles::Role;
use crate::transport::{AddressBook, LinkConfig, MemTransport, TcpTransport, Transport};

#[derive(Debug, Clone, Default)]
pub struct TransportSetup {
    pub codec: Codec,
    pub book: AddressBook,
    pub link: LinkConfig,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;
    fn transport(&self, setup: &TransportSetup) -> Arc<dyn Transport>;
    fn execute(&self, roles: Vec<Box<dyn Role>>, transport: Arc<dyn Transport>) -> ExecOutcome;
    /// True when peers run concurrently, so waits need deadlines.
    fn concurrent(&self) -> bool;
}

/// In-process pipes, every role on one thread; runs are reproducible.
pub struct Mem;

impl Backend for Mem {
    fn name(&self) -> &'static str {
        "mem"
    }

    fn transport(&self, setup: &TransportSetup) -> Arc<dyn Transport> {
        Arc::new(MemTransport::new(setup.codec))
    }

    fn execute(&self, roles: Vec<Box<dyn Role>>, transport: Arc<dyn Transport>) -> ExecOutcome {
        run_cooperative(roles, transport.as_ref())
    }

    fn concurrent(&self) -> bool {
        false
    }
}

/// TCP sockets, one thread per role.
pub struct Tcp;

impl Backend for Tcp {
    fn name(&self) -> &'static str {
        "tcp"
    }

    fn transport(&self, setup: &TransportSetup) -> Arc<dyn Transport> {
        Arc::new(TcpTransport::new(
            setup.book.clone(),
            setup.codec,
            setup.link.clone(),
        ))
    }

    fn execute(&self, roles: Vec<Box<dyn Role>>, transport: Arc<dyn Transport>) -> ExecOutcome {
        run_threaded(roles, transport)
    }

    fn concurrent(&self) -> bool {
        true
    }
}

pub fn backends() -> Registry<dyn Backend> {
    let mut r: Registry<dyn Backend> = Registry::new("backend");
    r.register("mem", Arc::new(Mem));
    r.register("tcp", Arc::new(Tcp));
    r
}
