//! Split federated learning primitives: a small CNN engine, model splitting,
//! per-device server sessions with checkpoint/restore, the wire protocol and
//! datasets.

pub mod data;
pub mod nn;
pub mod protocol;
pub mod session;
pub mod split;
