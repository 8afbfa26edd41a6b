use serde::{Deserialize, Serialize};

use crate::cka::{Proximal, ProximalForm};
use crate::datahub::PartitionMode;
use crate::error::{Error, Result};
use crate::sslnet::{Activation, AugmentConfig, LossConfig, MlpSpec, OptimConfig, StepConfig};

/// Inputs of a federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub eta: f64,
    pub momentum: f64,
    /// Minibatch size; `None` trains on the whole shard in one batch.
    pub batch_size: Option<usize>,
    pub mu: f64,
    pub proximal: ProximalForm,
    /// Centre Gram matrices inside the kernel proximal forms.
    pub centered: bool,
    pub normalize: bool,
    pub symmetrize: bool,
    pub rep_clip: Option<f64>,
    pub tau: f64,
    /// Aggregation weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Clients trained per round; all of them when absent.
    pub sample_size: Option<usize>,
    /// Encoder specs, assigned to clients cyclically (client `k` gets
    /// `architectures[k % len]`).
    pub architectures: Vec<MlpSpec>,
    pub rad_size: usize,
    pub partition: PartitionMode,
    pub augment: AugmentConfig,
    /// Record full-gradient, variance and Lipschitz probes every epoch.
    pub theory_probes: bool,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            clients: 5,
            rounds: 50,
            local_epochs: 5,
            eta: 0.032,
            momentum: 0.9,
            batch_size: Some(64),
            mu: 0.5,
            proximal: ProximalForm::OneMinusCka,
            centered: false,
            normalize: false,
            symmetrize: false,
            rep_clip: None,
            tau: 0.99,
            weights: None,
            sample_size: None,
            architectures: vec![
                MlpSpec {
                    layer_widths: vec![32, 64, 8],
                    activation: Activation::Tanh,
                },
                MlpSpec {
                    layer_widths: vec![32, 64, 16],
                    activation: Activation::Tanh,
                },
            ],
            rad_size: 256,
            partition: PartitionMode::Noniid,
            augment: AugmentConfig::default(),
            theory_probes: false,
            seed: 0,
        }
    }
}

impl FedConfig {
    /// Rounds, RAD size and optimiser settings of the original experiments.
    pub fn paper_defaults() -> FedConfig {
        FedConfig {
            rounds: 200,
            local_epochs: 5,
            momentum: 0.9,
            eta: 0.032,
            rad_size: 5000,
            ..FedConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 {
            return bad("at least one client is required".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1".into());
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return bad(format!("mu must be >= 0, got {}", self.mu));
        }
        if let Some(r) = self.rep_clip {
            if !(r > 0.0) || !r.is_finite() {
                return bad(format!("rep_clip must be positive, got {r}"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        let weights = self.client_weights()?;
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return bad("client weights must be non-negative".into());
        }
        let s = self.sample_size();
        if s == 0 || s > self.clients {
            return bad(format!("sample_size must lie in 1..={}, got {s}", self.clients));
        }
        if self.architectures.is_empty() {
            return bad("at least one encoder architecture is required".into());
        }
        let input = self.architectures[0].input_width();
        for spec in &self.architectures {
            spec.validate()?;
            if spec.input_width() != input {
                return bad(format!(
                    "all encoders must read {input} features, {} reads {}",
                    spec.label(),
                    spec.input_width()
                ));
            }
        }
        if !self.proximal.uses_kernel() {
            let w = self.architectures[0].output_width();
            if self.architectures.iter().any(|s| s.output_width() != w) {
                return bad(
                    "the l2_rep proximal form needs equal representation widths; use a kernel form for heterogeneous encoders"
                        .into(),
                );
            }
        }
        if self.rad_size < 2 {
            return bad(format!("rad_size must be at least 2, got {}", self.rad_size));
        }
        self.augment.validate()
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size.unwrap_or(self.clients)
    }

    /// Aggregation weights, uniform by default; must sum to 1 within 1e-9.
    pub fn client_weights(&self) -> Result<Vec<f64>> {
        match &self.weights {
            None => Ok(vec![1.0 / self.clients as f64; self.clients]),
            Some(w) => {
                if w.len() != self.clients {
                    return Err(Error::Config(format!(
                        "{} weights given for {} clients",
                        w.len(),
                        self.clients
                    )));
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("client weights sum to {total}, expected 1")));
                }
                Ok(w.clone())
            }
        }
    }

    pub fn spec_for(&self, client: usize) -> &MlpSpec {
        &self.architectures[client % self.architectures.len()]
    }

    pub fn feature_width(&self) -> usize {
        self.architectures[0].input_width()
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            loss: LossConfig {
                mu: self.mu,
                proximal: Proximal {
                    form: self.proximal,
                    centered: self.centered,
                },
                normalize: self.normalize,
                symmetrize: self.symmetrize,
                rep_clip: self.rep_clip,
            },
            optim: OptimConfig {
                eta: self.eta,
                momentum: self.momentum,
            },
            augment: self.augment,
        }
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            step: self.step_config(),
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            tau: self.tau,
            probes: self.theory_probes,
        }
    }
}

/// Settings of one client's local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub step: StepConfig,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub tau: f64,
    pub probes: bool,
}
