//! Partitioned tables as a microservice orchestrator.

pub mod bench;
pub mod engine;
pub mod http;
pub mod metrics;
pub mod mockserver;
pub mod reliability;
pub mod services;
pub mod table;
pub mod transformer;
pub mod transport;
