//! The federated protocol: a server that only ever holds alignment-set
//! payloads, clients that train locally against the aggregated reference,
//! serialized message passing between them, and a deterministic JSON-lines
//! trace of every round.

mod config;
mod local;
mod log;
mod run;
mod transport;

pub use config::{FedConfig, LocalConfig};
pub use local::{eval_views, local_training, measure, representation_change, LocalOutcome, StreamContext};
pub use log::{
    timings_to_jsonl, ClientRecord, Direction, EpochProbe, EpochRecord, LogRecord, MessageRecord, PayloadKind,
    RoundLog, RunHeader, ServerRecord, TimingRecord,
};
pub use run::{
    init_models, prepare, run_training, run_training_with, select_clients, train_standalone, RunOptions, RunOutput,
    Setup,
};
pub use transport::{server_aggregate, Broadcast, Server, Upload};
