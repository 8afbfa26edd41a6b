//! Federated self-supervised learning for clients with heterogeneous
//! encoders. Clients align through kernel similarity of their
//! representations on a shared, unlabeled alignment dataset (the RAD).
//!
//! Modules, bottom up:
//!
//! * [`numkit`]: dense matrices and counter-based random streams.
//! * [`cka`]: Gram matrices, linear CKA, aggregation and proximal terms.
//! * [`sslnet`]: online/target networks, losses, backpropagation.
//! * [`datahub`]: synthetic mixtures, CSV ingestion, partitioning, RAD.
//! * [`federation`]: the round loop, transport and trace log.
//! * [`eval`]: linear probes and collaboration reports.
//! * [`theory`]: assumption-constant estimates and bound checks.

pub mod cka;
pub mod datahub;
pub mod error;
pub mod eval;
pub mod federation;
pub mod numkit;
pub mod sslnet;
pub mod theory;

pub use error::{Error, Result};
