//! Linear evaluation of frozen encoders and the local-only versus
//! federated comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datahub::Dataset;
use crate::error::{Error, Result};
use crate::federation::FedConfig;
use crate::numkit::{Matrix, Purpose, RngStream, StreamId};
use crate::sslnet::ClientModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Z-score features with training statistics before the linear map.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            lr: 0.003,
            batch: 128,
            standardize: true,
        }
    }
}

/// Softmax regression on frozen representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    /// Mean cross-entropy of each epoch's minibatches.
    pub epoch_losses: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(dim: usize, classes: usize) -> LinearProbe {
        LinearProbe {
            weights: Matrix::zeros(dim, classes),
            biases: vec![0.0; classes],
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            epochs: 0,
            lr: 0.0,
            epoch_losses: Vec::new(),
        }
    }

    pub fn classes(&self) -> usize {
        self.biases.len()
    }

    fn prepare(&self, reps: &Matrix) -> Result<Matrix> {
        if reps.cols() != self.shift.len() {
            return Err(Error::shape(
                "LinearProbe",
                format!("representations have {} columns, probe expects {}", reps.cols(), self.shift.len()),
            ));
        }
        let cols = reps.cols();
        let data = reps
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.shift[i % cols]) / self.scale[i % cols])
            .collect();
        Matrix::new(reps.rows(), cols, data)
    }

    pub fn logits(&self, reps: &Matrix) -> Result<Matrix> {
        self.prepare(reps)?.matmul(&self.weights)?.add_row_vector(&self.biases)
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, reps: &Matrix) -> Result<Vec<usize>> {
        let z = self.logits(reps)?;
        Ok((0..z.rows()).map(|r| argmax(z.row(r))).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

fn check_labels(reps: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != reps.rows() {
        return Err(Error::shape(
            "train_probe",
            format!("{} labels for {} rows", labels.len(), reps.rows()),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
    }
    Ok(())
}

/// Softmax probabilities and mean cross-entropy of a batch.
fn softmax_ce(logits: &Matrix, labels: &[usize]) -> (Vec<f64>, f64) {
    let k = logits.cols();
    let mut probs = Vec::with_capacity(logits.rows() * k);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        loss += s.ln() + m - row[y];
        probs.extend(exps.into_iter().map(|e| e / s));
    }
    (probs, loss / labels.len() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Multinomial logistic regression from a zero initialisation with Adam
/// minibatch updates.
pub fn train_probe(
    reps: &Matrix,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    rng: &mut RngStream,
) -> Result<LinearProbe> {
    check_labels(reps, labels, classes)?;
    if classes == 0 || reps.rows() == 0 {
        return Err(Error::Degenerate("cannot fit a probe without rows or classes".into()));
    }
    if cfg.batch == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Config(format!("invalid probe settings {cfg:?}")));
    }
    let d = reps.cols();
    let mut probe = LinearProbe::zeros(d, classes);
    if cfg.standardize {
        let n = reps.rows() as f64;
        let mean: Vec<f64> = reps.column_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; d];
        for r in 0..reps.rows() {
            for (c, v) in reps.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2) / n;
            }
        }
        probe.scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        probe.shift = mean;
    }
    probe.epochs = cfg.epochs;
    probe.lr = cfg.lr;
    let x = probe.prepare(reps)?;

    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let mut opt_w = Adam::new(w.len());
    let mut opt_b = Adam::new(classes);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch) {
            let xb = x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let wm = Matrix::new(d, classes, w.clone())?;
            let logits = xb.matmul(&wm)?.add_row_vector(&b)?;
            let (mut probs, loss) = softmax_ce(&logits, &yb);
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    component: "linear probe".into(),
                });
            }
            total += loss;
            batches += 1;
            let nb = yb.len() as f64;
            for (r, &y) in yb.iter().enumerate() {
                probs[r * classes + y] -= 1.0;
            }
            for p in probs.iter_mut() {
                *p /= nb;
            }
            let g = Matrix::new(yb.len(), classes, probs)?;
            let gw = xb.t_matmul(&g)?;
            let gb = g.column_sums();
            opt_w.step(&mut w, gw.as_slice(), cfg.lr);
            opt_b.step(&mut b, &gb, cfg.lr);
        }
        probe.epoch_losses.push(total / batches as f64);
    }
    probe.weights = Matrix::new(d, classes, w)?;
    probe.biases = b;
    Ok(probe)
}

/// Fraction of rows whose arg-max class equals the label.
pub fn test_accuracy(probe: &LinearProbe, reps: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != reps.rows() {
        return Err(Error::shape(
            "test_accuracy",
            format!("{} labels for {} rows", labels.len(), reps.rows()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Degenerate("accuracy over an empty test set".into()));
    }
    let pred = probe.predict(reps)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client: usize,
    pub arch: String,
    pub accuracy: f64,
}

/// Trains one probe per client on the frozen online encoder's
/// representations of `train` and scores it on `test`.
pub fn evaluate_models(
    models: &[ClientModel],
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<ClientAccuracy>> {
    let classes = train.num_classes().max(test.num_classes());
    models
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            let tr = m.encode(train.features())?;
            let te = m.encode(test.features())?;
            let mut rng = RngStream::new(seed, StreamId::new(Purpose::Probe).client(k).index(1));
            let probe = train_probe(&tr, train.labels(), classes, cfg, &mut rng)?;
            Ok(ClientAccuracy {
                client: k,
                arch: m.spec.label(),
                accuracy: test_accuracy(&probe, &te, test.labels())?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.context("linear evaluation"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabRow {
    pub arch: String,
    pub clients: usize,
    pub local_only: f64,
    pub hetero_ssfl: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabReport {
    pub rows: Vec<CollabRow>,
    pub mean_local_only: f64,
    pub mean_hetero_ssfl: f64,
    pub mean_delta: f64,
}

impl CollabReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arch,clients,local_only,hetero_ssfl,delta\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.arch, r.clients, r.local_only, r.hetero_ssfl, r.delta);
        }
        let n: usize = self.rows.iter().map(|r| r.clients).sum();
        let _ = writeln!(
            out,
            "all,{n},{},{},{}",
            self.mean_local_only, self.mean_hetero_ssfl, self.mean_delta
        );
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "{}", serde_json::to_string(r)?);
        }
        Ok(out)
    }
}

/// Per-architecture mean accuracies of two evaluations of the same clients.
pub fn collab_report(local: &[ClientAccuracy], federated: &[ClientAccuracy]) -> Result<CollabReport> {
    if local.len() != federated.len() {
        return Err(Error::Config(format!(
            "{} local-only clients versus {} federated clients",
            local.len(),
            federated.len()
        )));
    }
    let mut groups: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for (a, b) in local.iter().zip(federated) {
        if a.client != b.client || a.arch != b.arch {
            return Err(Error::Config(format!(
                "client {} ({}) does not match client {} ({})",
                a.client, a.arch, b.client, b.arch
            )));
        }
        let g = groups.entry(&a.arch).or_insert((0, 0.0, 0.0));
        g.0 += 1;
        g.1 += a.accuracy;
        g.2 += b.accuracy;
    }
    let rows: Vec<CollabRow> = groups
        .into_iter()
        .map(|(arch, (n, l, h))| CollabRow {
            arch: arch.to_string(),
            clients: n,
            local_only: l / n as f64,
            hetero_ssfl: h / n as f64,
            delta: (h - l) / n as f64,
        })
        .collect();
    let n = local.len().max(1) as f64;
    let mean_local_only = local.iter().map(|c| c.accuracy).sum::<f64>() / n;
    let mean_hetero_ssfl = federated.iter().map(|c| c.accuracy).sum::<f64>() / n;
    Ok(CollabReport {
        rows,
        mean_local_only,
        mean_hetero_ssfl,
        mean_delta: mean_hetero_ssfl - mean_local_only,
    })
}

/// Checks that two run configurations differ in at most `mu`.
pub fn check_paired(local: &FedConfig, federated: &FedConfig) -> Result<()> {
    let mut a = local.clone();
    a.mu = federated.mu;
    if &a != federated {
        return Err(Error::Config(
            "runs to compare must share every setting except mu".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::gaussian_sample;

    fn rng(i: u64) -> RngStream {
        RngStream::new(41, StreamId::new(Purpose::Probe).index(i))
    }

    #[test]
    fn separable_one_dimensional() {
        let xs: Vec<f64> = (0..40).map(|i| if i < 20 { -1.0 - i as f64 * 0.05 } else { 1.0 + i as f64 * 0.05 }).collect();
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let reps = Matrix::new(40, 1, xs).unwrap();
        let probe = train_probe(&reps, &labels, 2, &ProbeConfig::default(), &mut rng(0)).unwrap();
        assert_eq!(test_accuracy(&probe, &reps, &labels).unwrap(), 1.0);
        let l = &probe.epoch_losses;
        assert!(l.last().unwrap() < &l[0]);
    }

    #[test]
    fn shuffled_labels_are_at_chance() {
        let mut r = rng(1);
        let reps = gaussian_sample(&mut r, 5000, 4, 0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..5000).map(|_| r.below(4)).collect();
        let test = gaussian_sample(&mut r, 5000, 4, 0.0, 1.0).unwrap();
        let test_labels: Vec<usize> = (0..5000).map(|_| r.below(4)).collect();
        let cfg = ProbeConfig { epochs: 5, ..ProbeConfig::default() };
        let probe = train_probe(&reps, &labels, 4, &cfg, &mut r).unwrap();
        let acc = test_accuracy(&probe, &test, &test_labels).unwrap();
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
    }

    #[test]
    fn zero_epochs_predicts_class_zero() {
        let reps = gaussian_sample(&mut rng(2), 10, 3, 0.0, 1.0).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 0, 2, 1];
        let cfg = ProbeConfig { epochs: 0, ..ProbeConfig::default() };
        let probe = train_probe(&reps, &labels, 3, &cfg, &mut rng(3)).unwrap();
        assert_eq!(probe.predict(&reps).unwrap(), vec![0; 10]);
        assert_eq!(test_accuracy(&probe, &reps, &labels).unwrap(), 0.4);
    }

    #[test]
    fn accuracy_matches_brute_force_and_is_row_order_free() {
        let mut r = rng(4);
        let reps = gaussian_sample(&mut r, 30, 3, 0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..30).map(|_| r.below(3)).collect();
        let mut probe = LinearProbe::zeros(3, 3);
        probe.weights = gaussian_sample(&mut r, 3, 3, 0.0, 1.0).unwrap();
        probe.biases = vec![0.1, -0.2, 0.05];
        let mut hits = 0;
        for i in 0..30 {
            let row = reps.row(i);
            let scores: Vec<f64> = (0..3)
                .map(|c| probe.biases[c] + (0..3).map(|j| row[j] * probe.weights.get(j, c)).sum::<f64>())
                .collect();
            let best = (0..3).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
            hits += usize::from(best == labels[i]);
        }
        let acc = test_accuracy(&probe, &reps, &labels).unwrap();
        assert!((acc - hits as f64 / 30.0).abs() < 1e-15);
        let perm: Vec<usize> = (0..30).rev().collect();
        let permuted: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(test_accuracy(&probe, &reps.select_rows(&perm), &permuted).unwrap(), acc);
    }

    #[test]
    fn memorised_single_point() {
        let reps = Matrix::from_rows(&[[2.0, -1.0]]).unwrap();
        let mut probe = LinearProbe::zeros(2, 3);
        probe.biases = vec![0.0, 0.0, 1.0];
        assert_eq!(test_accuracy(&probe, &reps, &[2]).unwrap(), 1.0);
    }

    #[test]
    fn identical_runs_have_zero_delta() {
        let acc = vec![
            ClientAccuracy { client: 0, arch: "a".into(), accuracy: 0.5 },
            ClientAccuracy { client: 1, arch: "b".into(), accuracy: 0.7 },
        ];
        let rep = collab_report(&acc, &acc).unwrap();
        assert!(rep.rows.iter().all(|r| r.delta == 0.0));
        assert_eq!(rep.mean_delta, 0.0);
        assert!(collab_report(&acc, &acc[..1]).is_err());
        assert!(rep.to_csv().starts_with("arch,clients"));
    }

    #[test]
    fn paired_configs() {
        let a = FedConfig { mu: 0.0, ..FedConfig::default() };
        let b = FedConfig::default();
        check_paired(&a, &b).unwrap();
        let c = FedConfig { rounds: 3, ..FedConfig::default() };
        assert!(check_paired(&a, &c).is_err());
    }
}
