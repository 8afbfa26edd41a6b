use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hssfl::datahub::{partition, sample_rad_from, MixtureModel};
use hssfl::eval::{check_paired, collab_report, evaluate_models, ClientAccuracy, ProbeConfig};
use hssfl::federation::{run_training_with, timings_to_jsonl, FedConfig, RoundLog, RunOptions};
use hssfl::numkit::{Matrix, Purpose, RngStream, StreamId};
use hssfl::sslnet::{load_checkpoint, save_checkpoint, AugmentConfig};
use hssfl::theory::{check_log, round_mean_losses};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::manifest::{split, unix_now, version_tag, write_text, Completion, DataSource, Outputs, RunManifest, COMPLETION, MANIFEST};
use crate::{CheckTheoryArgs, EvalArgs, GenDataArgs, RunArgs};

const SEED_VAR: &str = "HSSFL_SEED";

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

#[derive(Serialize)]
struct DataManifest<'a> {
    version: String,
    seed: u64,
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    noise: f64,
    rad_shift: Option<f64>,
    rad_size: Option<usize>,
    files: Vec<&'a str>,
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let mut rng = RngStream::new(seed, StreamId::new(Purpose::Data));
    let mixture = MixtureModel::new(a.classes, a.dim, a.separation, a.noise, &mut rng)?;
    let data = mixture.sample(a.per_class, &mut rng)?;
    if let Some(n) = a.clients {
        let mut prng = RngStream::new(seed, StreamId::new(Purpose::Partition));
        partition(&data, n, a.partition.into(), &mut prng)?;
    }
    create_dir(&a.out)?;
    let mut files = vec!["data.csv"];
    write_text(&a.out.join("data.csv"), &data.to_csv())?;
    if let Some(shift) = a.rad_shift {
        let offset = vec![shift / (a.dim as f64).sqrt(); a.dim];
        let mut rrng = RngStream::new(seed, StreamId::new(Purpose::Rad));
        let rad = sample_rad_from(&mixture.shifted(&offset)?, a.rad_size, &mut rrng)?;
        write_text(&a.out.join("rad.csv"), &rad.features.to_csv())?;
        files.push("rad.csv");
    }
    let manifest = DataManifest {
        version: version_tag(),
        seed,
        classes: a.classes,
        dim: a.dim,
        per_class: a.per_class,
        separation: a.separation,
        noise: a.noise,
        rad_shift: a.rad_shift,
        rad_size: a.rad_shift.map(|_| a.rad_size),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(hssfl::Error::from)?;
    write_text(&a.out.join("data_manifest.json"), &(text + "\n"))?;
    println!(
        "wrote {} rows ({} classes, {} features) to {}",
        data.len(),
        a.classes,
        a.dim,
        a.out.join("data.csv").display()
    );
    Ok(())
}

fn has_overrides(a: &RunArgs) -> bool {
    a.config.is_some()
        || a.paper_defaults
        || a.clients.is_some()
        || a.rounds.is_some()
        || a.local_epochs.is_some()
        || a.eta.is_some()
        || a.momentum.is_some()
        || a.batch_size.is_some()
        || a.full_batch
        || a.mu.is_some()
        || a.proximal.is_some()
        || a.centered
        || a.normalize
        || a.symmetrize
        || a.rep_clip.is_some()
        || a.tau.is_some()
        || a.sample_size.is_some()
        || a.rad_size.is_some()
        || a.partition.is_some()
        || a.aug_noise.is_some()
        || a.aug_mask.is_some()
        || a.theory_probes
        || a.seed.is_some()
}

fn toml_err(path: &Path) -> impl Fn(toml::de::Error) -> CliError + '_ {
    move |e| CliError::bad_file(path, e)
}

/// Defaults, then the config file, then flags. The seed additionally
/// falls back to `HSSFL_SEED` when neither the file nor a flag sets it.
pub fn resolve_config(a: &RunArgs) -> Result<FedConfig> {
    let base = if a.paper_defaults {
        FedConfig::paper_defaults()
    } else {
        FedConfig::default()
    };
    let mut file_sets_seed = false;
    let mut cfg = match &a.config {
        None => base,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(CliError::io(path))?;
            let overlay: toml::Table = text.parse().map_err(toml_err(path))?;
            file_sets_seed = overlay.contains_key("seed");
            let mut merged = toml::Table::try_from(&base).map_err(|e| CliError::Usage(e.to_string()))?;
            merged.extend(overlay);
            merged.try_into().map_err(toml_err(path))?
        }
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { cfg.$field = v; })*
        };
    }
    set!(clients, rounds, local_epochs, eta, momentum, mu, tau);
    if let Some(b) = a.batch_size {
        cfg.batch_size = Some(b);
    }
    if a.full_batch {
        cfg.batch_size = None;
    }
    if let Some(p) = a.proximal {
        cfg.proximal = p.into();
    }
    if let Some(p) = a.partition {
        cfg.partition = p.into();
    }
    if a.rep_clip.is_some() {
        cfg.rep_clip = a.rep_clip;
    }
    if a.sample_size.is_some() {
        cfg.sample_size = a.sample_size;
    }
    if let Some(l) = a.rad_size {
        cfg.rad_size = l;
    }
    cfg.augment = AugmentConfig {
        noise_std: a.aug_noise.unwrap_or(cfg.augment.noise_std),
        mask_prob: a.aug_mask.unwrap_or(cfg.augment.mask_prob),
    };
    cfg.centered |= a.centered;
    cfg.normalize |= a.normalize;
    cfg.symmetrize |= a.symmetrize;
    cfg.theory_probes |= a.theory_probes;
    cfg.seed = match a.seed {
        Some(s) => s,
        None if file_sets_seed => cfg.seed,
        None => env_seed()?.unwrap_or(cfg.seed),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn last_column(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| CliError::bad_file(path, "no data rows"))?;
    Ok(line.split(',').count().saturating_sub(1))
}

fn fresh_manifest(a: &RunArgs) -> Result<RunManifest> {
    let cfg = resolve_config(a)?;
    let data = match &a.data {
        Some(path) => DataSource::File {
            path: path.clone(),
            label_column: match a.label_column {
                Some(c) => c,
                None => last_column(path)?,
            },
        },
        None => DataSource::desk(cfg.seed),
    };
    if !(0.0 < a.train_fraction && a.train_fraction <= 1.0) {
        return Err(CliError::Usage(format!(
            "--train-fraction must lie in (0, 1], got {}",
            a.train_fraction
        )));
    }
    Ok(RunManifest {
        version: version_tag(),
        seed: cfg.seed,
        config: cfg,
        data,
        train_fraction: a.train_fraction,
        rad: a.rad.clone(),
        started_at: unix_now(),
        outputs: Outputs::under(&a.out),
    })
}

fn same_run(a: &RunManifest, b: &RunManifest) -> bool {
    a.config == b.config && a.data == b.data && a.train_fraction == b.train_fraction && a.rad == b.rad
}

pub fn run(a: &RunArgs) -> Result<()> {
    create_dir(&a.out)?;
    let existing = a.out.join(MANIFEST).exists();
    let manifest = if a.resume {
        if !existing {
            return Err(CliError::Usage(format!(
                "--resume needs an earlier run in {}",
                a.out.display()
            )));
        }
        let old = RunManifest::read(&a.out)?;
        if has_overrides(a) && !same_run(&old, &fresh_manifest(a)?) {
            return Err(CliError::Usage(
                "the flags given with --resume differ from the run's manifest".into(),
            ));
        }
        old
    } else {
        if existing {
            return Err(CliError::Usage(format!(
                "{} already holds a run; pass --resume or choose another --out",
                a.out.display()
            )));
        }
        let m = fresh_manifest(a)?;
        m.write_new(&a.out)?;
        m
    };
    let cfg = &manifest.config;
    let outputs = Outputs::under(&a.out);
    let resolved = toml::to_string(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    write_text(&outputs.config, &resolved)?;
    if a.dry_run {
        println!("resolved configuration written to {}", outputs.config.display());
        return Ok(());
    }

    let data = manifest.data.load()?;
    let (train, _) = split(&data, manifest.train_fraction, cfg.seed)?;
    let rad = match &manifest.rad {
        Some(p) => Some(Matrix::read_csv(p).map_err(|e| e.context(format!("reading {}", p.display())))?),
        None => None,
    };
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let opts = RunOptions {
        workers,
        rad,
        checkpoint_dir: Some(outputs.checkpoints.clone()),
        resume: a.resume,
        stop_after: a.stop_after,
    };
    let out = run_training_with(cfg, &train, &opts)?;
    out.log.write(&outputs.log)?;
    write_text(&outputs.timings, &timings_to_jsonl(&out.timings)?)?;
    let done = out.log.completed_rounds();
    for (k, m) in out.models.iter().enumerate() {
        save_checkpoint(&outputs.models.join(format!("client_{k}")), m, done)?;
    }
    let completion = Completion {
        finished_at: unix_now(),
        rounds_completed: done,
        rounds_planned: cfg.rounds,
    };
    let text = serde_json::to_string_pretty(&completion).map_err(hssfl::Error::from)?;
    write_text(&a.out.join(COMPLETION), &(text + "\n"))?;

    let losses = round_mean_losses(&out.log);
    match losses.last() {
        Some(l) => println!("{done}/{} rounds, mean client loss {l:.6}", cfg.rounds),
        None => println!("{done}/{} rounds", cfg.rounds),
    }
    Ok(())
}

fn evaluate_run(dir: &Path, probe: &ProbeConfig) -> Result<(RunManifest, Vec<ClientAccuracy>)> {
    let m = RunManifest::read(dir)?;
    let models_dir = dir.join("models");
    let mut models = Vec::with_capacity(m.config.clients);
    for k in 0..m.config.clients {
        let path = models_dir.join(format!("client_{k}"));
        if !path.join("manifest.toml").exists() {
            return Err(CliError::MissingCheckpoints(models_dir));
        }
        models.push(load_checkpoint(&path)?.0);
    }
    let data = m.data.load()?;
    let (train, test) = split(&data, m.train_fraction, m.seed)?;
    if test.is_empty() {
        return Err(CliError::Usage("the run kept no test rows (train fraction 1)".into()));
    }
    let acc = evaluate_models(&models, &train, &test, probe, m.seed)?;
    Ok((m, acc))
}

fn accuracy_csv(acc: &[ClientAccuracy]) -> String {
    let mut out = String::from("client,arch,accuracy\n");
    for a in acc {
        let _ = writeln!(out, "{},{},{}", a.client, a.arch, a.accuracy);
    }
    out
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        let _ = writeln!(out, "{}", serde_json::to_string(it).map_err(hssfl::Error::from)?);
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let probe = ProbeConfig {
        epochs: a.probe_epochs,
        lr: a.probe_lr,
        batch: a.probe_batch,
        ..ProbeConfig::default()
    };
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    let (run, acc) = evaluate_run(&a.run, &probe)?;
    write_text(&out.join("accuracy.csv"), &accuracy_csv(&acc))?;
    write_text(&out.join("accuracy.jsonl"), &jsonl(&acc)?)?;
    let mean = acc.iter().map(|c| c.accuracy).sum::<f64>() / acc.len().max(1) as f64;
    println!("mean linear-probe accuracy {mean:.4} over {} clients", acc.len());

    if let Some(base_dir) = &a.baseline {
        let (base, base_acc) = evaluate_run(base_dir, &probe)?;
        check_paired(&base.config, &run.config)?;
        if base.data != run.data || base.train_fraction != run.train_fraction {
            return Err(CliError::Usage("the baseline run used different data".into()));
        }
        let report = collab_report(&base_acc, &acc)?;
        write_text(&out.join("collab.csv"), &report.to_csv())?;
        write_text(&out.join("collab.jsonl"), &report.to_jsonl()?)?;
        print!("{}", report.to_csv());
    }
    Ok(())
}

pub fn check_theory(a: &CheckTheoryArgs) -> Result<()> {
    let path: PathBuf = if a.log.is_dir() {
        a.log.join("log.jsonl")
    } else {
        a.log.clone()
    };
    let log = RoundLog::read(&path).map_err(|e| e.context(format!("reading {}", path.display())))?;
    let report = check_log(&log, None)?;
    let out = match &a.out {
        Some(d) => d.clone(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let target = out.join("bounds.jsonl");
    write_text(&target, &report.to_jsonl()?)?;
    print!("{}", report.summary());
    println!("reports written to {}", target.display());
    Ok(())
}
