use serde::{Deserialize, Serialize};

use super::mlp::{Dense, Mlp, MlpSpec, Tape};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Trainable parameters of the online branch: encoder layers then predictor.
/// Also used for gradients and momentum buffers of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineParams {
    pub encoder: Vec<Dense>,
    pub predictor: Dense,
}

impl OnlineParams {
    pub fn zeros_like(&self) -> OnlineParams {
        OnlineParams {
            encoder: self.encoder.iter().map(Dense::zeros_like).collect(),
            predictor: self.predictor.zeros_like(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(std::iter::once(&self.predictor))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain(std::iter::once(&mut self.predictor))
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &OnlineParams) -> Result<()> {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Result<OnlineParams> {
        Ok(OnlineParams {
            encoder: self.encoder.iter().map(|d| d.scaled(alpha)).collect::<Result<_>>()?,
            predictor: self.predictor.scaled(alpha)?,
        })
    }

    /// All parameters in a fixed order: for each layer its weight (row-major)
    /// then its bias; predictor last.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for d in self.layers() {
            d.flatten_into(&mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// Inverse of [`OnlineParams::flatten`].
    pub fn load_flat(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::shape(
                "OnlineParams::load_flat",
                format!("{} values for {} parameters", src.len(), self.param_count()),
            ));
        }
        let mut offset = 0;
        for d in self.layers_mut() {
            offset += d.load_flat(&src[offset..])?;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance between two parameter sets of the same shape.
    pub fn distance(&self, other: &OnlineParams) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Online encoder and predictor, EMA target encoder, and SGD momentum buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub spec: MlpSpec,
    pub online: OnlineParams,
    pub target: Vec<Dense>,
    pub tau: f64,
    pub momentum: OnlineParams,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("EMA coefficient must lie in [0, 1], got {tau}")));
    }
    Ok(())
}

impl ClientModel {
    /// He-initialised online encoder and predictor; the target starts as an
    /// exact copy of the online encoder.
    pub fn init(spec: &MlpSpec, predictor_width: usize, tau: f64, rng: &mut RngStream) -> Result<ClientModel> {
        spec.validate()?;
        check_tau(tau)?;
        if predictor_width != spec.output_width() {
            return Err(Error::Config(format!(
                "predictor width {predictor_width} must equal the encoder output width {} so that online and target outputs are comparable",
                spec.output_width()
            )));
        }
        let encoder = Mlp::init(spec, rng)?;
        let predictor = Dense::he(spec.output_width(), predictor_width, rng)?;
        let online = OnlineParams {
            encoder: encoder.layers.clone(),
            predictor,
        };
        let momentum = online.zeros_like();
        Ok(ClientModel {
            spec: spec.clone(),
            target: encoder.layers,
            online,
            tau,
            momentum,
        })
    }

    pub fn online_encoder(&self) -> Mlp {
        Mlp {
            layers: self.online.encoder.clone(),
            activation: self.spec.activation,
        }
    }

    pub fn target_encoder(&self) -> Mlp {
        Mlp {
            layers: self.target.clone(),
            activation: self.spec.activation,
        }
    }

    pub fn rep_width(&self) -> usize {
        self.online.predictor.fan_out()
    }

    /// Online encoder output (the features a linear probe sees).
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.online_encoder().forward(x)
    }

    /// `F'(x; Wᵗ)`. Never part of any gradient.
    pub fn forward_target(&self, x: &Matrix) -> Result<Matrix> {
        self.target_encoder().forward(x)
    }

    /// Target outputs with the same row clipping as the online representations.
    pub fn target_outputs(&self, x: &Matrix, rep_clip: Option<f64>) -> Result<Matrix> {
        Ok(clip_rows(&self.forward_target(x)?, rep_clip)?.0)
    }

    /// `F(x; [Wᵒ, Wᵖ])` with the tape needed for backpropagation.
    pub fn forward_online(&self, x: &Matrix, rep_clip: Option<f64>) -> Result<OnlineTape> {
        let encoder = self.online_encoder();
        let enc = encoder.forward_tape(x)?;
        let raw = self.online.predictor.apply(enc.output())?;
        let (output, clip_scales) = clip_rows(&raw, rep_clip)?;
        Ok(OnlineTape {
            encoder: enc,
            raw,
            clip_scales,
            output,
        })
    }

    /// `Φ(X; Wᵒ)`: predictor output on `x`, no augmentation.
    pub fn representations(&self, x: &Matrix, rep_clip: Option<f64>) -> Result<Matrix> {
        let h = self.encode(x)?;
        let raw = self.online.predictor.apply(&h)?;
        Ok(clip_rows(&raw, rep_clip)?.0)
    }

    /// Backpropagates `grad_out = ∂loss/∂output` to online parameter gradients.
    pub fn backward_online(&self, tape: &OnlineTape, grad_out: &Matrix) -> Result<OnlineParams> {
        let grad_raw = unclip_grad(&tape.raw, &tape.clip_scales, grad_out)?;
        let gw = tape.encoder.output().t_matmul(&grad_raw)?;
        let gb = grad_raw.column_sums();
        let grad_h = grad_raw.matmul_t(&self.online.predictor.weight)?;
        let (enc_grads, _) = self.online_encoder().backward(&tape.encoder, &grad_h)?;
        Ok(OnlineParams {
            encoder: enc_grads,
            predictor: Dense { weight: gw, bias: gb },
        })
    }

    /// `Wᵗ ← τ Wᵗ + (1 − τ) Wᵒ` for every encoder tensor, evaluated as
    /// `Wᵗ + (1 − τ)(Wᵒ − Wᵗ)` so that equal networks stay bit-identical.
    pub fn ema_update(mut self, tau: f64) -> Result<ClientModel> {
        check_tau(tau)?;
        let alpha = 1.0 - tau;
        for (t, o) in self.target.iter_mut().zip(&self.online.encoder) {
            let w = t.weight.add_scaled(&o.weight.sub(&t.weight)?, alpha)?;
            t.weight = w;
            for (tb, ob) in t.bias.iter_mut().zip(&o.bias) {
                *tb += alpha * (ob - *tb);
            }
        }
        Ok(self)
    }

    /// Euclidean distance between the target and online encoders.
    pub fn target_drift(&self) -> f64 {
        let mut s = 0.0;
        for (t, o) in self.target.iter().zip(&self.online.encoder) {
            s += t.weight.sub(&o.weight).map_or(0.0, |d| crate::numkit::frobenius_norm(&d).powi(2));
            s += t.bias.iter().zip(&o.bias).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        s.sqrt()
    }
}

/// Forward cache of the online branch.
#[derive(Debug, Clone)]
pub struct OnlineTape {
    encoder: Tape,
    raw: Matrix,
    clip_scales: Vec<f64>,
    output: Matrix,
}

impl OnlineTape {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn encoder_tape(&self) -> &Tape {
        &self.encoder
    }
}

/// Rescales rows with norm above `radius` onto the sphere. Returns the
/// per-row scale (1 where untouched).
fn clip_rows(raw: &Matrix, radius: Option<f64>) -> Result<(Matrix, Vec<f64>)> {
    let Some(r) = radius else {
        return Ok((raw.clone(), vec![1.0; raw.rows()]));
    };
    let scales: Vec<f64> = raw
        .row_norms()
        .into_iter()
        .map(|n| if n > r { r / n } else { 1.0 })
        .collect();
    let mut data = raw.as_slice().to_vec();
    if raw.cols() > 0 {
        for (row, s) in data.chunks_mut(raw.cols()).zip(&scales) {
            for v in row {
                *v *= s;
            }
        }
    }
    Ok((Matrix::new(raw.rows(), raw.cols(), data)?, scales))
}

/// Gradient through [`clip_rows`]: for a clipped row `y' = r y / ‖y‖` the
/// Jacobian is `(r/‖y‖)(I − ŷŷᵀ)`.
fn unclip_grad(raw: &Matrix, scales: &[f64], grad_out: &Matrix) -> Result<Matrix> {
    if scales.iter().all(|&s| s == 1.0) {
        return Ok(grad_out.clone());
    }
    let cols = raw.cols();
    let mut data = grad_out.as_slice().to_vec();
    for (i, s) in scales.iter().enumerate() {
        if *s == 1.0 {
            continue;
        }
        let y = raw.row(i);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = &mut data[i * cols..(i + 1) * cols];
        let proj: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
        for (gv, yv) in g.iter_mut().zip(y) {
            *gv = s * (*gv - proj * yv);
        }
    }
    Matrix::new(raw.rows(), cols, data)
}
