use serde::{Deserialize, Serialize};

use super::loss::{augment, ssl_loss, ssl_loss_grad, AugmentConfig, ViewPair};
use super::model::{ClientModel, OnlineParams};
use crate::cka::{Proximal, ProximalForm, Reference};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Terms of the local objective `ℓ + μ·d`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub ssl: f64,
    pub prox: f64,
    pub total: f64,
}

/// How the local objective is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mu: f64,
    pub proximal: Proximal,
    /// L2-normalise rows before the SSL regression.
    pub normalize: bool,
    /// Add the swapped-view term as well.
    pub symmetrize: bool,
    /// Per-row clipping radius for representations.
    pub rep_clip: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mu: 0.5,
            proximal: Proximal::new(ProximalForm::OneMinusCka),
            normalize: false,
            symmetrize: false,
            rep_clip: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub eta: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            eta: 0.032,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
}

/// Loss decomposition before the step and the norm of the gradient used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossParts,
    pub grad_norm: f64,
}

fn numerical(component: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite(_) => Error::Numerical {
            component: component.to_string(),
        },
        other => other,
    }
}

fn finite(v: f64, component: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical {
            component: component.to_string(),
        })
    }
}

fn proximal_reference<'a>(cfg: &LossConfig, reference: Option<&'a Reference>) -> Result<Option<&'a Reference>> {
    if cfg.mu < 0.0 || !cfg.mu.is_finite() {
        return Err(Error::Config(format!("mu must be >= 0, got {}", cfg.mu)));
    }
    if cfg.mu == 0.0 {
        return Ok(None);
    }
    match reference {
        Some(r) => Ok(Some(r)),
        None => Err(Error::Config("mu > 0 requires a proximal reference".into())),
    }
}

fn ssl_value(model: &ClientModel, views: &ViewPair, cfg: &LossConfig) -> Result<f64> {
    let one = |a: &Matrix, b: &Matrix| -> Result<f64> {
        let pred = model.forward_online(a, cfg.rep_clip)?;
        let target = model.target_outputs(b, cfg.rep_clip)?;
        ssl_loss(pred.output(), &target, cfg.normalize)
    };
    let mut v = one(&views.v_prime, &views.v_doubleprime)?;
    if cfg.symmetrize {
        v += one(&views.v_doubleprime, &views.v_prime)?;
    }
    finite(v, "ssl loss")
}

/// Value of the local objective on fixed views, with the target network and
/// the reference held constant.
pub fn objective(
    model: &ClientModel,
    views: &ViewPair,
    rad: &Matrix,
    reference: Option<&Reference>,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let reference = proximal_reference(cfg, reference)?;
    let ssl = ssl_value(model, views, cfg).map_err(numerical("ssl loss"))?;
    let prox = match reference {
        None => 0.0,
        Some(r) => {
            let phi = model.representations(rad, cfg.rep_clip)?;
            finite(cfg.proximal.value(&phi, r, cfg.mu)?, "proximal term")?
        }
    };
    Ok(LossParts {
        ssl,
        prox,
        total: ssl + prox,
    })
}

/// Objective value and its gradient with respect to the online parameters.
pub fn objective_grad(
    model: &ClientModel,
    views: &ViewPair,
    rad: &Matrix,
    reference: Option<&Reference>,
    cfg: &LossConfig,
) -> Result<(LossParts, OnlineParams)> {
    let reference = proximal_reference(cfg, reference)?;
    let mut ssl = 0.0;
    let mut grad: Option<OnlineParams> = None;
    let mut accumulate = |g: OnlineParams| -> Result<()> {
        match grad.as_mut() {
            None => grad = Some(g),
            Some(acc) => acc.axpy(1.0, &g)?,
        }
        Ok(())
    };

    let mut directions = vec![(&views.v_prime, &views.v_doubleprime)];
    if cfg.symmetrize {
        directions.push((&views.v_doubleprime, &views.v_prime));
    }
    for (online_in, target_in) in directions {
        let tape = model
            .forward_online(online_in, cfg.rep_clip)
            .map_err(numerical("online forward"))?;
        let target = model.target_outputs(target_in, cfg.rep_clip).map_err(numerical("target forward"))?;
        ssl += ssl_loss(tape.output(), &target, cfg.normalize)?;
        let g_out = ssl_loss_grad(tape.output(), &target, cfg.normalize).map_err(numerical("ssl gradient"))?;
        accumulate(model.backward_online(&tape, &g_out).map_err(numerical("ssl gradient"))?)?;
    }
    let ssl = finite(ssl, "ssl loss")?;

    let mut prox = 0.0;
    if let Some(r) = reference {
        let tape = model
            .forward_online(rad, cfg.rep_clip)
            .map_err(numerical("representation forward"))?;
        let phi = tape.output();
        prox = finite(cfg.proximal.value(phi, r, cfg.mu)?, "proximal term")?;
        let g_phi = cfg
            .proximal
            .grad(phi, r)
            .and_then(|g| g.scale(cfg.mu))
            .map_err(numerical("proximal gradient"))?;
        accumulate(model.backward_online(&tape, &g_phi).map_err(numerical("proximal gradient"))?)?;
    }

    let grad = grad.expect("at least one SSL direction");
    Ok((
        LossParts {
            ssl,
            prox,
            total: ssl + prox,
        },
        grad,
    ))
}

/// One SGD-with-momentum step on fixed views: `v ← m·v + g`, `W ← W − η·v`.
/// `η = 0` leaves the model (buffers included) untouched.
pub fn step_on_views(
    model: ClientModel,
    views: &ViewPair,
    rad: &Matrix,
    reference: Option<&Reference>,
    cfg: &StepConfig,
) -> Result<(ClientModel, StepReport)> {
    let OptimConfig { eta, momentum } = cfg.optim;
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("learning rate must be >= 0, got {eta}")));
    }
    let (loss, grad) = objective_grad(&model, views, rad, reference, &cfg.loss)?;
    let grad_norm = finite(grad.norm(), "gradient norm")?;
    let report = StepReport { loss, grad_norm };
    if eta == 0.0 {
        return Ok((model, report));
    }
    let mut model = model;
    let mut velocity = model.momentum.scaled(momentum).map_err(numerical("momentum"))?;
    velocity.axpy(1.0, &grad).map_err(numerical("momentum"))?;
    model.online.axpy(-eta, &velocity).map_err(numerical("parameter update"))?;
    model.momentum = velocity;
    Ok((model, report))
}

/// Augments `batch` with `rng` and takes one step of the combined objective.
pub fn combined_step(
    model: ClientModel,
    batch: &Matrix,
    rad: &Matrix,
    reference: Option<&Reference>,
    cfg: &StepConfig,
    rng: &RngStream,
) -> Result<(ClientModel, StepReport)> {
    let views = augment(batch, &cfg.augment, rng)?;
    step_on_views(model, &views, rad, reference, cfg)
}
