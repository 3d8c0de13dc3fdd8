//! Operational shell around the core library: configuration files, dataset
//! ingestion, checkpointing, experiment manifests, and the phase runners the
//! command-line binary sequences.

pub mod checkpoint;
pub mod config;
pub mod ingest;
pub mod report;
pub mod trainer;
