pub mod codec;
pub mod domain;
pub mod gateway;
pub mod ingest;
pub mod metrics;
pub mod orchestrator;
pub mod parser;
pub mod prompt;
pub mod store;
