//! Detection and characterization of large-scale IPv6 scanning in
//! unsolicited-packet logs.
//!
//! The pipeline: parse packet records ([`ingest`]), drop connection-retry
//! artifacts ([`artifact`]), aggregate sources by prefix and detect scans
//! ([`detect`]), then compute scan metrics ([`characterize`]). The
//! [`synth`] module generates labeled synthetic traces so every stage can
//! be validated against ground truth.

pub mod artifact;
pub mod characterize;
pub mod detect;
pub mod ingest;
pub mod model;
pub mod synth;

pub use detect::{DetectParams, Detector, EventRecord, ScanEvent};
pub use ingest::{AsnTable, DnsOracle, Format, Strictness};
pub use model::{Address, PacketRecord, Prefix, Proto};
