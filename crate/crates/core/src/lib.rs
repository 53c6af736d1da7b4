//! Trace analysis for an in-memory data store and the microservices around it.

pub mod aggregate;
pub mod analysis;
pub mod detect;
pub mod event;
pub mod flows;
pub mod pipeline;
pub mod query;
pub mod sht;
pub mod spans;
pub mod state;
pub mod syngen;
