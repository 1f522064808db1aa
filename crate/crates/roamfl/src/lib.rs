pub mod backend;
pub mod config;
pub mod exec;
pub mod experiment;
pub mod metrics;
pub mod registry;
pub mod roles;
pub mod transport;
