#![allow(dead_code)]

use hssfl::cka::{gram_linear, Proximal, ProximalForm, Reference};
use hssfl::datahub::{synth_mixture, Dataset};
use hssfl::Error;
use hssfl::federation::FedConfig;
use hssfl::numkit::{gaussian_sample, Purpose, RngStream, StreamId};
use hssfl::sslnet::{objective, objective_grad, Activation, ClientModel, LossConfig, MlpSpec, ViewPair};

pub fn stream(seed: u64, index: u64) -> RngStream {
    RngStream::new(seed, StreamId::new(Purpose::Test).index(index))
}

/// The desk-scale mixture: 10 classes in 32 dimensions.
pub fn mixture(seed: u64, per_class: usize) -> Dataset {
    let mut rng = RngStream::new(seed, StreamId::new(Purpose::Data));
    synth_mixture(10, 32, per_class, 1.0, 0.1, &mut rng).unwrap()
}

/// A run small enough for functional tests.
pub fn small_config(seed: u64) -> FedConfig {
    FedConfig {
        clients: 5,
        rounds: 3,
        local_epochs: 2,
        batch_size: Some(32),
        rad_size: 32,
        seed,
        architectures: vec![
            MlpSpec::new(vec![32, 16, 8], Activation::Tanh).unwrap(),
            MlpSpec::new(vec![32, 16, 16], Activation::Relu).unwrap(),
        ],
        ..FedConfig::default()
    }
}

/// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-12)` between the analytic
/// gradient and central differences of the objective.
pub fn gradient_error(
    model: &ClientModel,
    views: &ViewPair,
    rad: &hssfl::numkit::Matrix,
    reference: Option<&Reference>,
    cfg: &LossConfig,
) -> f64 {
    let (_, grad) = objective_grad(model, views, rad, reference, cfg).unwrap();
    let analytic = grad.flatten();
    let w = model.online.flatten();
    let h = 1e-6;
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let mut wp = w.clone();
        wp[i] += h;
        probe.online.load_flat(&wp).unwrap();
        let fp = objective(&probe, views, rad, reference, cfg).unwrap().total;
        wp[i] -= 2.0 * h;
        probe.online.load_flat(&wp).unwrap();
        let fm = objective(&probe, views, rad, reference, cfg).unwrap().total;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

pub const ZOO_WIDTHS: [usize; 3] = [2, 3, 5];
pub const ZOO_DEPTHS: [usize; 3] = [1, 2, 3];
pub const FORMS: [ProximalForm; 4] = [
    ProximalForm::OneMinusCka,
    ProximalForm::RawCka,
    ProximalForm::TraceAlignment,
    ProximalForm::L2Rep,
];

/// Largest relative gradient error over `points` random parameter vectors
/// of one zoo member.
pub fn zoo_case(
    width: usize,
    depth: usize,
    activation: Activation,
    form: ProximalForm,
    normalize: bool,
    points: usize,
    seed: u64,
) -> f64 {
    let input = 4;
    let mut widths = vec![input];
    widths.extend(std::iter::repeat(width).take(depth));
    let spec = MlpSpec::new(widths, activation).unwrap();
    let base = seed * 1000;
    let batch = gaussian_sample(&mut stream(base, 1), 6, input, 0.0, 1.0).unwrap();
    let noisy = batch
        .add_scaled(&gaussian_sample(&mut stream(base, 2), 6, input, 0.0, 0.1).unwrap(), 1.0)
        .unwrap();
    let views = ViewPair {
        v_prime: batch,
        v_doubleprime: noisy,
    };
    let rad = gaussian_sample(&mut stream(base, 3), 5, input, 0.0, 1.0).unwrap();
    let reference = if form.uses_kernel() {
        let other = gaussian_sample(&mut stream(base, 4), 5, 3, 0.0, 1.0).unwrap();
        Reference::Kernel(gram_linear(&other).unwrap())
    } else {
        Reference::Representation(gaussian_sample(&mut stream(base, 4), 5, width, 0.0, 1.0).unwrap())
    };
    let cfg = LossConfig {
        mu: 0.7,
        proximal: Proximal::new(form),
        normalize,
        symmetrize: false,
        rep_clip: None,
    };
    // The target network is never perturbed, so it must produce no zero rows.
    let model = (0..50)
        .map(|i| ClientModel::init(&spec, width, 0.9, &mut stream(base, 100 + i)).unwrap())
        .find(|m| objective(m, &views, &rad, Some(&reference), &cfg).is_ok())
        .expect("no initialization with a well-defined loss");
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let w0 = model.online.flatten();
    let mut used = 0;
    let mut draw = 0u64;
    while used < points {
        assert!(draw < 50 * points as u64, "no differentiable points found");
        let mut rng = stream(base, 10 + draw);
        draw += 1;
        let w: Vec<f64> = w0.iter().map(|x| x + 0.5 * rng.normal()).collect();
        probe.online.load_flat(&w).unwrap();
        // A dead ReLU layer can zero a row, where normalization is undefined.
        if matches!(objective(&probe, &views, &rad, Some(&reference), &cfg), Err(Error::Degenerate(_))) {
            continue;
        }
        worst = worst.max(gradient_error(&probe, &views, &rad, Some(&reference), &cfg));
        used += 1;
    }
    worst
}
