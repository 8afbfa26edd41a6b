mod common;

use common::{mixture, small_config};
use hssfl::cka::{gram_linear, linear_cka, ProximalForm};
use hssfl::federation::{
    local_training, run_training, run_training_with, select_clients, train_standalone, Direction, FedConfig,
    PayloadKind, RoundLog, RunOptions, StreamContext,
};
use hssfl::numkit::{gaussian_sample, Purpose, RngStream, StreamId};
use hssfl::sslnet::{fingerprint, load_checkpoint, save_checkpoint, Activation, AugmentConfig, ClientModel, MlpSpec};

#[test]
fn zero_mu_matches_standalone_training() {
    let cfg = FedConfig {
        mu: 0.0,
        ..small_config(4)
    };
    let data = mixture(4, 40);
    let fed = run_training(&cfg, &data).unwrap();
    let solo = train_standalone(&cfg, &data, &RunOptions::default()).unwrap();
    assert_eq!(fed.models, solo);
    assert!(fed.log.clients().all(|c| c.loss_after.prox == 0.0));
}

#[test]
fn worker_count_does_not_change_the_log() {
    let cfg = small_config(5);
    let data = mixture(5, 40);
    let run = |workers| {
        let opts = RunOptions {
            workers,
            ..RunOptions::default()
        };
        run_training_with(&cfg, &data, &opts).unwrap()
    };
    let (a, b) = (run(1), run(8));
    assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
    assert_eq!(a.models, b.models);
}

#[test]
fn zero_rounds_return_initial_models() {
    let cfg = FedConfig {
        rounds: 0,
        ..small_config(6)
    };
    let out = run_training(&cfg, &mixture(6, 40)).unwrap();
    assert_eq!(out.models, hssfl::federation::init_models(&cfg).unwrap());
    assert_eq!(out.log.clients().count(), 0);
    assert_eq!(out.log.completed_rounds(), 0);
}

#[test]
fn single_client_proximal_term_matches_offline_cka() {
    let base = FedConfig {
        clients: 1,
        weights: Some(vec![1.0]),
        mu: 0.5,
        ..small_config(7)
    };
    let data = mixture(7, 20);
    let models: Vec<ClientModel> = (0..=3)
        .map(|t| run_training(&FedConfig { rounds: t, ..base.clone() }, &data).unwrap().models[0].clone())
        .collect();
    let out = run_training(&FedConfig { rounds: 3, ..base.clone() }, &data).unwrap();
    let rad = &out.setup.rad;
    let gram = |m: &ClientModel| gram_linear(&m.representations(rad, base.rep_clip).unwrap()).unwrap();
    for rec in out.log.clients() {
        let t = rec.round;
        let offline_before = 0.5 * (1.0 - linear_cka(&gram(&models[t - 1]), &gram(&models[t - 1])).unwrap());
        let offline_after = 0.5 * (1.0 - linear_cka(&gram(&models[t]), &gram(&models[t - 1])).unwrap());
        assert!((rec.loss_before.prox - offline_before).abs() < 1e-12, "round {t}");
        assert!((rec.loss_after.prox - offline_after).abs() < 1e-12, "round {t}");
        assert!(rec.loss_after_swap.prox.abs() < 1e-12, "round {t}");
    }
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let cfg = FedConfig {
        rounds: 4,
        ..small_config(8)
    };
    let data = mixture(8, 30);
    let full = run_training(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(2),
        ..RunOptions::default()
    };
    let partial = run_training_with(&cfg, &data, &first).unwrap();
    assert_eq!(partial.log.completed_rounds(), 2);
    let second = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        resume: true,
        ..RunOptions::default()
    };
    let resumed = run_training_with(&cfg, &data, &second).unwrap();
    assert_eq!(resumed.models, full.models);
    assert_eq!(resumed.log.to_jsonl().unwrap(), full.log.to_jsonl().unwrap());
}

#[test]
fn resume_rejects_a_different_configuration() {
    let cfg = FedConfig {
        rounds: 3,
        ..small_config(9)
    };
    let data = mixture(9, 30);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(1),
        ..RunOptions::default()
    };
    run_training_with(&cfg, &data, &opts).unwrap();
    let other = FedConfig { mu: 0.1, ..cfg };
    let resume = RunOptions {
        resume: true,
        stop_after: None,
        ..opts
    };
    assert!(run_training_with(&other, &data, &resume).is_err());
}

#[test]
fn heterogeneous_widths_upload_square_grams() {
    let cfg = small_config(10);
    let out = run_training(&cfg, &mixture(10, 40)).unwrap();
    let l = out.setup.rad.rows();
    let ups: Vec<_> = out.log.messages().filter(|m| m.direction == Direction::ToServer).collect();
    assert_eq!(ups.len(), cfg.clients * (cfg.rounds + 1));
    for m in &ups {
        assert_eq!((m.payload, m.rows, m.cols), (PayloadKind::Gram, l, l));
    }
    let widths: Vec<usize> = out.log.clients().map(|c| c.rep_width).collect();
    assert!(widths.contains(&8) && widths.contains(&16));
}

#[test]
fn upload_size_does_not_grow_with_the_model() {
    let data = mixture(11, 30);
    let bytes_for = |hidden: usize| {
        let cfg = FedConfig {
            rounds: 1,
            architectures: vec![MlpSpec::new(vec![32, hidden, 8], Activation::Tanh).unwrap()],
            ..small_config(11)
        };
        let out = run_training(&cfg, &data).unwrap();
        let ups: Vec<usize> = out
            .log
            .messages()
            .filter(|m| m.direction == Direction::ToServer)
            .map(|m| m.bytes)
            .collect();
        ups.iter().sum::<usize>() as f64 / ups.len() as f64
    };
    let (small, large) = (bytes_for(4), bytes_for(128));
    assert!((large / small - 1.0).abs() < 0.2, "{small} vs {large}");
}

#[test]
fn message_log_respects_the_protocol() {
    let cfg = FedConfig {
        clients: 5,
        sample_size: Some(2),
        rounds: 4,
        ..small_config(12)
    };
    let out = run_training(&cfg, &mixture(12, 40)).unwrap();
    let log = RoundLog::from_jsonl(&out.log.to_jsonl().unwrap()).unwrap();
    let mut last = (0, Direction::ToClient, 0);
    let mut first = true;
    for m in log.messages() {
        match m.direction {
            Direction::ToServer => assert!(matches!(m.payload, PayloadKind::Gram)),
            Direction::ToClient => assert_eq!(m.payload, PayloadKind::Broadcast),
        }
        if m.round > 0 {
            let sampled = &log.servers().find(|s| s.round == m.round).unwrap().sampled;
            assert!(sampled.contains(&m.client), "round {} client {}", m.round, m.client);
        }
        let key = (m.round, m.direction, m.client);
        if !first && key.0 == last.0 && key.1 == last.1 {
            assert!(key.2 > last.2, "messages out of client order in round {}", m.round);
        }
        assert!(first || key.0 >= last.0);
        first = false;
        last = key;
    }
    for s in log.servers().filter(|s| s.round > 0) {
        let down: usize = log
            .messages()
            .filter(|m| m.round == s.round && m.direction == Direction::ToClient)
            .map(|m| m.bytes)
            .sum();
        assert_eq!(down, s.bytes_down);
        assert_eq!(s.sampled.len(), 2);
    }
}

#[test]
fn representation_mode_uploads_representations() {
    let cfg = FedConfig {
        proximal: ProximalForm::L2Rep,
        architectures: vec![MlpSpec::new(vec![32, 16, 8], Activation::Tanh).unwrap()],
        ..small_config(13)
    };
    let out = run_training(&cfg, &mixture(13, 30)).unwrap();
    let l = out.setup.rad.rows();
    for m in out.log.messages().filter(|m| m.direction == Direction::ToServer) {
        assert_eq!((m.payload, m.rows, m.cols), (PayloadKind::Representation, l, 8));
    }
}

#[test]
fn selection_frequencies_are_uniform() {
    let (n, s, rounds) = (10, 3, 10_000);
    let mut counts = vec![0usize; n];
    for t in 1..=rounds {
        let ids = select_clients(n, s, t, 42);
        assert_eq!(ids.len(), s);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        for k in ids {
            counts[k] += 1;
        }
    }
    for c in counts {
        let f = c as f64 / rounds as f64;
        assert!((f - 0.3).abs() < 0.02, "{f}");
    }
    assert_eq!(select_clients(n, n, 3, 1), (0..n).collect::<Vec<_>>());
    assert_eq!(select_clients(n, s, 5, 1), select_clients(n, s, 5, 1));
}

#[test]
fn every_client_is_drawn_equally_often_per_cycle() {
    for (n, s) in [(20, 5), (10, 4), (7, 3)] {
        let g = (1..=s).rev().find(|g| n % g == 0 && s % g == 0).unwrap();
        let cycle = n / g;
        for c in 0..3 {
            let mut counts = vec![0usize; n];
            for t in 1 + c * cycle..=(c + 1) * cycle {
                for k in select_clients(n, s, t, 8) {
                    counts[k] += 1;
                }
            }
            assert!(counts.iter().all(|&k| k == s / g), "n={n} s={s}: {counts:?}");
        }
    }
}

fn single_client_setup(seed: u64) -> (ClientModel, hssfl::numkit::Matrix, hssfl::numkit::Matrix) {
    let spec = MlpSpec::new(vec![6, 12, 4], Activation::Tanh).unwrap();
    let mut r = RngStream::new(seed, StreamId::new(Purpose::Test));
    let model = ClientModel::init(&spec, 4, 0.99, &mut r).unwrap();
    let shard = gaussian_sample(&mut r, 40, 6, 0.0, 1.0).unwrap();
    let rad = gaussian_sample(&mut r, 16, 6, 0.0, 1.0).unwrap();
    (model, shard, rad)
}

#[test]
fn local_training_replays_from_a_checkpoint() {
    let (model, shard, rad) = single_client_setup(1);
    let cfg = FedConfig {
        mu: 0.0,
        ..FedConfig::default()
    }
    .local_config();
    let ctx = StreamContext {
        seed: 3,
        client: 0,
        round: 1,
    };
    let warm = local_training(model, &shard, &rad, None, &cfg, &ctx).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &warm, 1).unwrap();
    let (restored, round) = load_checkpoint(dir.path()).unwrap();
    assert_eq!((fingerprint(&restored), round), (fingerprint(&warm), 1));
    let ctx2 = StreamContext { round: 2, ..ctx };
    let a = local_training(warm, &shard, &rad, None, &cfg, &ctx2).unwrap();
    let b = local_training(restored, &shard, &rad, None, &cfg, &ctx2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn local_epochs_descend_below_the_step_threshold() {
    let mut fc = FedConfig {
        mu: 0.0,
        momentum: 0.0,
        batch_size: None,
        augment: AugmentConfig::NONE,
        theory_probes: true,
        rep_clip: Some(1.0),
        local_epochs: 1,
        ..FedConfig::default()
    };
    let mut descended = 0;
    let trials = 20;
    for seed in 0..trials {
        let (model, shard, rad) = single_client_setup(100 + seed);
        fc.eta = 0.032;
        let ctx = StreamContext {
            seed,
            client: 0,
            round: 1,
        };
        let out = local_training(model, &shard, &rad, None, &fc.local_config(), &ctx).unwrap();
        let p = out.epochs[0].probe.unwrap();
        let l1 = p.grad_change / p.param_change;
        assert!(fc.eta < 2.0 / l1, "seed {seed}: eta above 2/L1 = {}", 2.0 / l1);
        if p.loss_end.total <= p.loss_start.total {
            descended += 1;
        }
    }
    assert!(descended as f64 >= 0.9 * trials as f64, "{descended}/{trials}");
}
