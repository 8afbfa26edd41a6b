use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Two augmented views of the same source batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub v_prime: Matrix,
    pub v_doubleprime: Matrix,
}

impl ViewPair {
    /// Both views equal to the batch (no augmentation).
    pub fn identical(batch: &Matrix) -> ViewPair {
        ViewPair {
            v_prime: batch.clone(),
            v_doubleprime: batch.clone(),
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> ViewPair {
        ViewPair {
            v_prime: self.v_prime.select_rows(indices),
            v_doubleprime: self.v_doubleprime.select_rows(indices),
        }
    }
}

/// Additive Gaussian noise followed by per-entry zero masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub mask_prob: f64,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        noise_std: 0.0,
        mask_prob: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob must lie in [0, 1), got {}", self.mask_prob)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.noise_std == 0.0 && self.mask_prob == 0.0
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_std: 0.1,
            mask_prob: 0.1,
        }
    }
}

fn one_view(batch: &Matrix, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<Matrix> {
    let data = batch
        .as_slice()
        .iter()
        .map(|&x| {
            let noisy = if cfg.noise_std > 0.0 { x + cfg.noise_std * rng.normal() } else { x };
            if cfg.mask_prob > 0.0 && rng.uniform() < cfg.mask_prob {
                0.0
            } else {
                noisy
            }
        })
        .collect();
    Matrix::new(batch.rows(), batch.cols(), data)
}

/// Draws the two views from independent sub-streams of `rng`.
pub fn augment(batch: &Matrix, cfg: &AugmentConfig, rng: &RngStream) -> Result<ViewPair> {
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(ViewPair::identical(batch));
    }
    Ok(ViewPair {
        v_prime: one_view(batch, cfg, &mut rng.substream(0))?,
        v_doubleprime: one_view(batch, cfg, &mut rng.substream(1))?,
    })
}

fn check_pair(pred: &Matrix, target: &Matrix) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "ssl_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.rows() == 0 {
        return Err(Error::Degenerate("ssl loss over an empty batch".into()));
    }
    Ok(())
}

fn unit_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let norms = m.row_norms();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("row {i} is zero and cannot be normalized")));
    }
    let cols = m.cols();
    let mut data = m.as_slice().to_vec();
    for (row, n) in data.chunks_mut(cols).zip(&norms) {
        for v in row {
            *v /= n;
        }
    }
    Ok((Matrix::new(m.rows(), cols, data)?, norms))
}

/// Mean over the batch of `‖p_b − t_b‖²`, optionally on L2-normalised rows.
pub fn ssl_loss(pred: &Matrix, target: &Matrix, normalize: bool) -> Result<f64> {
    check_pair(pred, target)?;
    let (p, t) = if normalize {
        (unit_rows(pred)?.0, unit_rows(target)?.0)
    } else {
        (pred.clone(), target.clone())
    };
    let sq: f64 = p
        .as_slice()
        .iter()
        .zip(t.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / pred.rows() as f64)
}

/// `∂ ssl_loss / ∂ pred`, with the target held constant.
pub fn ssl_loss_grad(pred: &Matrix, target: &Matrix, normalize: bool) -> Result<Matrix> {
    check_pair(pred, target)?;
    let b = pred.rows() as f64;
    if !normalize {
        return pred.sub(target)?.scale(2.0 / b);
    }
    let (p_hat, norms) = unit_rows(pred)?;
    let (t_hat, _) = unit_rows(target)?;
    let cols = pred.cols();
    let mut data = vec![0.0; pred.rows() * cols];
    for i in 0..pred.rows() {
        let p = p_hat.row(i);
        let diff: Vec<f64> = p.iter().zip(t_hat.row(i)).map(|(a, b)| a - b).collect();
        let proj: f64 = p.iter().zip(&diff).map(|(a, d)| a * d).sum();
        for c in 0..cols {
            data[i * cols + c] = 2.0 / (b * norms[i]) * (diff[c] - proj * p[c]);
        }
    }
    Matrix::new(pred.rows(), cols, data)
}
