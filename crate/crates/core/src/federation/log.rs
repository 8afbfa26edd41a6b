use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::FedConfig;
use crate::error::{Error, Result};
use crate::sslnet::LossParts;

/// Per-epoch measurements taken under the objective of that epoch (same
/// target network, same reference, fixed probe views of the whole shard).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochProbe {
    /// Objective at the epoch-start weights.
    pub loss_start: LossParts,
    /// Objective at the epoch-end weights, before the EMA update.
    pub loss_end: LossParts,
    /// Norm of the full-shard gradient at the epoch-start weights.
    pub grad_norm_full: f64,
    /// Norm of the full-shard gradient at the epoch-end weights.
    pub grad_norm_full_end: f64,
    /// `‖∇L(W_end) − ∇L(W_start)‖`.
    pub grad_change: f64,
    /// `‖W_end − W_start‖` over all online parameters.
    pub param_change: f64,
    /// `‖W_end − W_start‖` over encoder parameters only.
    pub encoder_change: f64,
    /// `‖Φ(W_end) − Φ(W_start)‖_F` on the alignment set.
    pub rep_change: f64,
    /// Mean of `‖g_b − ∇L‖²` over the epoch's minibatches at the
    /// epoch-start weights; zero with a single batch and no augmentation.
    pub sigma2: f64,
    pub variance_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over steps of the minibatch losses (before each step).
    pub loss: LossParts,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    /// Largest row norm of the representations of the alignment set after
    /// the epoch.
    pub rep_norm_max: f64,
    pub probe: Option<EpochProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub round: usize,
    pub client: usize,
    pub spec: String,
    pub rep_width: usize,
    pub shard_size: usize,
    /// Objective on the round's evaluation views against the previous
    /// reference, before local training.
    pub loss_before: LossParts,
    /// Same views and reference after local training.
    pub loss_after: LossParts,
    /// Same views and weights against the freshly aggregated reference.
    pub loss_after_swap: LossParts,
    pub epochs: Vec<EpochRecord>,
    /// `‖Φ(W(t)) − Φ(W(t−1))‖_F` on the alignment set over the round.
    pub round_rep_change: f64,
    /// Encoder parameter distance over the round.
    pub round_encoder_change: f64,
    pub bytes_down: usize,
    pub bytes_up: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerRecord {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Frobenius norm of the aggregated reference after this round.
    pub reference_norm: f64,
    pub bytes_down: usize,
    pub bytes_up: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToClient,
    ToServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    /// Alignment set plus the current reference.
    Broadcast,
    Gram,
    Representation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub payload: PayloadKind,
    pub rows: usize,
    pub cols: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: FedConfig,
    pub shard_sizes: Vec<usize>,
    pub rad_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Run(RunHeader),
    Message(MessageRecord),
    Client(ClientRecord),
    Server(ServerRecord),
}

/// Everything a run emits that is a pure function of its configuration.
/// Serialized as JSON lines: a `run` header followed by per-round
/// messages, client records and one server record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub header: RunHeader,
    pub records: Vec<LogRecord>,
}

impl RoundLog {
    pub fn new(header: RunHeader) -> RoundLog {
        RoundLog {
            header,
            records: Vec::new(),
        }
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Client(c) => Some(c),
            _ => None,
        })
    }

    pub fn servers(&self) -> impl Iterator<Item = &ServerRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Server(s) => Some(s),
            _ => None,
        })
    }

    pub fn messages(&self) -> impl Iterator<Item = &MessageRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Message(m) => Some(m),
            _ => None,
        })
    }

    /// Rounds with a server record, i.e. fully completed rounds.
    pub fn completed_rounds(&self) -> usize {
        self.servers().filter(|s| s.round > 0).count()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = LogRecord::Run(self.header.clone());
        for r in std::iter::once(&header).chain(&self.records) {
            let _ = writeln!(out, "{}", serde_json::to_string(r)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<RoundLog> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })?;
            match rec {
                LogRecord::Run(h) if header.is_none() => header = Some(h),
                LogRecord::Run(_) => {
                    return Err(Error::Parse {
                        line: i + 1,
                        detail: "second run header".into(),
                    })
                }
                other if header.is_none() => {
                    return Err(Error::Parse {
                        line: i + 1,
                        detail: format!("record before the run header: {other:?}"),
                    })
                }
                other => records.push(other),
            }
        }
        let header = header.ok_or_else(|| Error::Parse {
            line: 1,
            detail: "log has no run header".into(),
        })?;
        Ok(RoundLog { header, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<RoundLog> {
        RoundLog::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

/// Wall-clock measurements, kept out of the deterministic log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub round: usize,
    pub client: usize,
    pub seconds: f64,
}

pub fn timings_to_jsonl(timings: &[TimingRecord]) -> Result<String> {
    let mut out = String::new();
    for t in timings {
        let _ = writeln!(out, "{}", serde_json::to_string(t)?);
    }
    Ok(out)
}
