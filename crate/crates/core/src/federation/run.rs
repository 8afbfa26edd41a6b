use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::FedConfig;
use super::local::{eval_views, local_training, measure, representation_change, StreamContext};
use super::log::{ClientRecord, LogRecord, RoundLog, RunHeader, ServerRecord, TimingRecord};
use super::transport::{Broadcast, Server, Upload};
use crate::cka::Reference;
use crate::datahub::{partition, sample_rad, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::numkit::{frobenius_norm, Matrix, Purpose, RngStream, StreamId};
use crate::sslnet::{load_checkpoint, save_checkpoint, ClientModel};

/// Execution knobs that never change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Parallel client workers; 0 uses every available core.
    pub workers: usize,
    /// Alignment set to use instead of sampling one from the data.
    pub rad: Option<Matrix>,
    /// Directory for the resumable state written after every round.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the state in `checkpoint_dir` if one exists.
    pub resume: bool,
    /// Stop after this round, as if the process had been interrupted.
    pub stop_after: Option<usize>,
}

/// Client shards and the alignment set derived from the data and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub plan: PartitionPlan,
    pub shards: Vec<Matrix>,
    pub rad: Matrix,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub models: Vec<ClientModel>,
    pub log: RoundLog,
    pub timings: Vec<TimingRecord>,
    pub setup: Setup,
    /// Reference after the last completed round (absent when no round ran).
    pub reference: Option<Reference>,
}

fn stream(seed: u64, purpose: Purpose) -> RngStream {
    RngStream::new(seed, StreamId::new(purpose))
}

/// Reserves the alignment set (unless one is supplied) and partitions the
/// remaining rows.
pub fn prepare(cfg: &FedConfig, data: &Dataset, rad: Option<&Matrix>) -> Result<Setup> {
    cfg.validate()?;
    if data.dim() != cfg.feature_width() {
        return Err(Error::Config(format!(
            "data has {} features but the encoders read {}",
            data.dim(),
            cfg.feature_width()
        )));
    }
    let mut pool = data.clone();
    let rad = match rad {
        Some(m) => {
            if m.cols() != data.dim() || m.rows() < 2 {
                return Err(Error::Config(format!(
                    "alignment set is {}x{}, expected at least 2 rows of width {}",
                    m.rows(),
                    m.cols(),
                    data.dim()
                )));
            }
            m.clone()
        }
        None => sample_rad(&mut pool, cfg.rad_size, &mut stream(cfg.seed, Purpose::Rad))?.features,
    };
    let plan = partition(&pool, cfg.clients, cfg.partition, &mut stream(cfg.seed, Purpose::Partition))?;
    let shards: Vec<Matrix> = plan.client_indices.iter().map(|idx| pool.features().select_rows(idx)).collect();
    if let Some(k) = shards.iter().position(|s| s.rows() == 0) {
        return Err(Error::Config(format!("client {k} received no training rows")));
    }
    Ok(Setup { plan, shards, rad })
}

pub fn init_models(cfg: &FedConfig) -> Result<Vec<ClientModel>> {
    (0..cfg.clients)
        .map(|k| {
            let spec = cfg.spec_for(k);
            let mut rng = RngStream::new(cfg.seed, StreamId::new(Purpose::Init).client(k));
            ClientModel::init(spec, spec.output_width(), cfg.tau, &mut rng)
        })
        .collect()
}

/// Uniform sample of `sample_size` clients without replacement, ascending.
///
/// Rounds are dealt from a reshuffled deck: a cycle of `n / gcd(n, s)`
/// rounds walks a fresh random permutation `s` positions at a time, so every
/// client is drawn exactly `s / gcd(n, s)` times per cycle while each
/// round on its own is still a uniform `s`-subset.
pub fn select_clients(n: usize, sample_size: usize, round: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    if sample_size >= n {
        return ids;
    }
    let cycle = n / gcd(n, sample_size);
    let slot = round.saturating_sub(1);
    let mut rng = RngStream::new(seed, StreamId::new(Purpose::Selection).index((slot / cycle) as u64));
    rng.shuffle(&mut ids);
    let start = (slot % cycle) * sample_size;
    let mut picked: Vec<usize> = (0..sample_size).map(|i| ids[(start + i) % n]).collect();
    picked.sort_unstable();
    picked
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

struct ClientTurn {
    model: ClientModel,
    record: ClientRecord,
    upload: Upload,
    seconds: f64,
}

fn client_turn(
    cfg: &FedConfig,
    client: usize,
    round: usize,
    model: ClientModel,
    shard: &Matrix,
    msg: &Broadcast,
) -> Result<ClientTurn> {
    let started = Instant::now();
    let local = cfg.local_config();
    let ctx = StreamContext {
        seed: cfg.seed,
        client,
        round,
    };
    let (rad, reference) = msg.open()?;
    let views = eval_views(shard, &local, &ctx)?;
    let loss_before = measure(&model, &views, &rad, Some(&reference), &local)?;
    let before = model.clone();
    let outcome = local_training(model, shard, &rad, Some(&reference), &local, &ctx)?;
    let loss_after = measure(&outcome.model, &views, &rad, Some(&reference), &local)?;
    let (round_rep_change, round_encoder_change) =
        representation_change(&before, &outcome.model, &rad, cfg.rep_clip)?;
    let phi = outcome.model.representations(&rad, cfg.rep_clip)?;
    let upload = Upload::from_representations(round, client, &phi, cfg.proximal)?;
    let record = ClientRecord {
        round,
        client,
        spec: cfg.spec_for(client).label(),
        rep_width: outcome.model.rep_width(),
        shard_size: shard.rows(),
        loss_before,
        loss_after,
        loss_after_swap: loss_after,
        epochs: outcome.epochs,
        round_rep_change,
        round_encoder_change,
        bytes_down: msg.bytes(),
        bytes_up: upload.bytes(),
    };
    Ok(ClientTurn {
        model: outcome.model,
        record,
        upload,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct StateManifest {
    completed_round: usize,
}

fn save_state(dir: &Path, models: &[ClientModel], server: &Server, log: &RoundLog, round: usize) -> Result<()> {
    let tmp = dir.join("state.tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    for (k, m) in models.iter().enumerate() {
        save_checkpoint(&tmp.join(format!("client_{k}")), m, round)?;
    }
    for (k, p) in server.latest.iter().enumerate() {
        if let Some(p) = p {
            p.write_csv(tmp.join(format!("payload_{k}.csv")))?;
        }
    }
    log.write(tmp.join("log.jsonl"))?;
    let manifest = toml::to_string(&StateManifest { completed_round: round })
        .map_err(|e| Error::Config(format!("cannot encode state manifest: {e}")))?;
    fs::write(tmp.join("state.toml"), manifest)?;
    let live = dir.join("state");
    let old = dir.join("state.old");
    if live.exists() {
        fs::rename(&live, &old)?;
    }
    fs::rename(&tmp, &live)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

struct Restored {
    models: Vec<ClientModel>,
    server: Server,
    log: RoundLog,
    round: usize,
}

fn load_state(dir: &Path, cfg: &FedConfig, header: &RunHeader) -> Result<Option<Restored>> {
    let live = dir.join("state");
    if !live.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(live.join("state.toml"))?;
    let manifest: StateManifest =
        toml::from_str(&text).map_err(|e| Error::Config(format!("unreadable state manifest: {e}")))?;
    let log = RoundLog::read(live.join("log.jsonl"))?;
    if &log.header != header {
        return Err(Error::Config(
            "saved state was produced by a different configuration or dataset".into(),
        ));
    }
    let mut models = Vec::with_capacity(cfg.clients);
    for k in 0..cfg.clients {
        let (m, r) = load_checkpoint(&live.join(format!("client_{k}")))?;
        if r != manifest.completed_round {
            return Err(Error::Config(format!("client {k} checkpoint is from round {r}")));
        }
        models.push(m);
    }
    let mut server = Server::new(cfg.proximal, cfg.client_weights()?);
    server.round = manifest.completed_round;
    for k in 0..cfg.clients {
        server.latest[k] = Some(Matrix::read_csv(live.join(format!("payload_{k}.csv")))?);
    }
    Ok(Some(Restored {
        models,
        server,
        log,
        round: manifest.completed_round,
    }))
}

pub fn run_training(cfg: &FedConfig, data: &Dataset) -> Result<RunOutput> {
    run_training_with(cfg, data, &RunOptions::default())
}

/// Runs the federated protocol: bootstrap payloads from the initial models,
/// then for each round broadcast, local training of the sampled clients,
/// upload and aggregation.
pub fn run_training_with(cfg: &FedConfig, data: &Dataset, opts: &RunOptions) -> Result<RunOutput> {
    let setup = prepare(cfg, data, opts.rad.as_ref())?;
    let header = RunHeader {
        config: cfg.clone(),
        shard_sizes: setup.shards.iter().map(Matrix::rows).collect(),
        rad_rows: setup.rad.rows(),
    };
    let workers = pool(opts.workers)?;
    let weights = cfg.client_weights()?;
    let rad = &setup.rad;

    let restored = match (&opts.checkpoint_dir, opts.resume) {
        (Some(dir), true) => load_state(dir, cfg, &header)?,
        _ => None,
    };
    let (mut models, mut server, mut log, first_round) = match restored {
        Some(r) => (r.models, r.server, r.log, r.round + 1),
        None => (init_models(cfg)?, Server::new(cfg.proximal, weights), RoundLog::new(header), 1),
    };
    let mut timings = Vec::new();
    if cfg.rounds == 0 {
        return Ok(RunOutput {
            models,
            log,
            timings,
            setup,
            reference: None,
        });
    }

    if first_round == 1 {
        let uploads: Vec<Upload> = workers.install(|| {
            models
                .par_iter()
                .enumerate()
                .map(|(k, m)| {
                    let phi = m.representations(rad, cfg.rep_clip)?;
                    Upload::from_representations(0, k, &phi, cfg.proximal)
                })
                .collect::<Result<_>>()
        })?;
        let all: Vec<usize> = (0..cfg.clients).collect();
        let reference = server.aggregate(&uploads, &all).map_err(|e| e.context("bootstrap"))?;
        for u in &uploads {
            log.records.push(LogRecord::Message(u.record()));
        }
        log.records.push(LogRecord::Server(ServerRecord {
            round: 0,
            sampled: all,
            reference_norm: frobenius_norm(reference.matrix()),
            bytes_down: 0,
            bytes_up: uploads.iter().map(Upload::bytes).sum(),
        }));
    }
    let mut reference = server.reference()?;

    for round in first_round..=cfg.rounds {
        let sampled = select_clients(cfg.clients, cfg.sample_size(), round, cfg.seed);
        let msg = Broadcast::new(round, rad, &reference);
        for &k in &sampled {
            log.records.push(LogRecord::Message(msg.record(k, rad.rows())));
        }
        let turns: Vec<ClientTurn> = workers.install(|| {
            sampled
                .par_iter()
                .map(|&k| {
                    client_turn(cfg, k, round, models[k].clone(), &setup.shards[k], &msg)
                        .map_err(|e| e.context(format!("round {round}, client {k}")))
                })
                .collect::<Result<_>>()
        })?;
        let uploads: Vec<Upload> = turns.iter().map(|t| t.upload.clone()).collect();
        let next = server
            .aggregate(&uploads, &sampled)
            .map_err(|e| e.context(format!("round {round}")))?;
        server.round = round;

        let local = cfg.local_config();
        let swapped: Vec<crate::sslnet::LossParts> = workers.install(|| {
            turns
                .par_iter()
                .map(|t| {
                    let ctx = StreamContext {
                        seed: cfg.seed,
                        client: t.record.client,
                        round,
                    };
                    let shard = &setup.shards[t.record.client];
                    let views = eval_views(shard, &local, &ctx)?;
                    measure(&t.model, &views, rad, Some(&next), &local)
                        .map_err(|e| e.context(format!("round {round}, client {}", t.record.client)))
                })
                .collect::<Result<_>>()
        })?;

        for u in &uploads {
            log.records.push(LogRecord::Message(u.record()));
        }
        for (turn, after_swap) in turns.into_iter().zip(swapped) {
            let mut record = turn.record;
            record.loss_after_swap = after_swap;
            timings.push(TimingRecord {
                round,
                client: record.client,
                seconds: turn.seconds,
            });
            models[record.client] = turn.model;
            log.records.push(LogRecord::Client(record));
        }
        log.records.push(LogRecord::Server(ServerRecord {
            round,
            sampled: sampled.clone(),
            reference_norm: frobenius_norm(next.matrix()),
            bytes_down: msg.bytes() * sampled.len(),
            bytes_up: uploads.iter().map(Upload::bytes).sum(),
        }));
        reference = next;

        if let Some(dir) = &opts.checkpoint_dir {
            save_state(dir, &models, &server, &log, round)?;
        }
        if opts.stop_after == Some(round) {
            break;
        }
    }
    Ok(RunOutput {
        models,
        log,
        timings,
        setup,
        reference: Some(reference),
    })
}

/// Each client trains alone on its shard with the same streams, rounds and
/// client sampling as a federated run, and without a proximal term.
pub fn train_standalone(cfg: &FedConfig, data: &Dataset, opts: &RunOptions) -> Result<Vec<ClientModel>> {
    let setup = prepare(cfg, data, opts.rad.as_ref())?;
    let mut models = init_models(cfg)?;
    let mut local = cfg.local_config();
    local.step.loss.mu = 0.0;
    let workers = pool(opts.workers)?;
    for round in 1..=cfg.rounds {
        let sampled = select_clients(cfg.clients, cfg.sample_size(), round, cfg.seed);
        let trained: Vec<ClientModel> = workers.install(|| {
            sampled
                .par_iter()
                .map(|&k| {
                    let ctx = StreamContext {
                        seed: cfg.seed,
                        client: k,
                        round,
                    };
                    local_training(models[k].clone(), &setup.shards[k], &setup.rad, None, &local, &ctx)
                        .map(|o| o.model)
                        .map_err(|e| e.context(format!("round {round}, client {k}")))
                })
                .collect::<Result<_>>()
        })?;
        for (&k, m) in sampled.iter().zip(trained) {
            models[k] = m;
        }
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sample_is_everyone() {
        assert_eq!(select_clients(4, 4, 7, 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn selection_is_deterministic_and_sorted() {
        let a = select_clients(20, 5, 3, 11);
        assert_eq!(a, select_clients(20, 5, 3, 11));
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, select_clients(20, 5, 4, 11));
    }

    #[test]
    fn selection_frequency() {
        let rounds = 10_000;
        let mut counts = [0usize; 8];
        for t in 1..=rounds {
            for k in select_clients(8, 3, t, 5) {
                counts[k] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / rounds as f64;
            assert!((f - 3.0 / 8.0).abs() < 0.02, "{f}");
        }
    }
}
