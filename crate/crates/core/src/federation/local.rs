use super::config::LocalConfig;
use super::log::{EpochProbe, EpochRecord};
use crate::cka::Reference;
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Purpose, RngStream, StreamId};
use crate::sslnet::{augment, objective, objective_grad, step_on_views, ClientModel, LossParts, ViewPair};

/// Where a client's random streams come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamContext {
    pub seed: u64,
    pub client: usize,
    pub round: usize,
}

impl StreamContext {
    pub fn stream(&self, purpose: Purpose, epoch: usize, index: u64) -> RngStream {
        RngStream::new(
            self.seed,
            StreamId::new(purpose)
                .client(self.client)
                .round(self.round)
                .epoch(epoch)
                .index(index),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub model: ClientModel,
    pub epochs: Vec<EpochRecord>,
}

fn batches(n: usize, batch_size: Option<usize>, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let size = batch_size.unwrap_or(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    if size >= n {
        return vec![order];
    }
    rng.shuffle(&mut order);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn encoder_distance(a: &ClientModel, b: &ClientModel) -> f64 {
    a.online
        .encoder
        .iter()
        .zip(&b.online.encoder)
        .map(|(x, y)| {
            let w: f64 = x.weight.as_slice().iter().zip(y.weight.as_slice()).map(|(p, q)| (p - q) * (p - q)).sum();
            let c: f64 = x.bias.iter().zip(&y.bias).map(|(p, q)| (p - q) * (p - q)).sum();
            w + c
        })
        .sum::<f64>()
        .sqrt()
}

/// Representation drift and encoder distance between two models on `rad`.
pub fn representation_change(
    a: &ClientModel,
    b: &ClientModel,
    rad: &Matrix,
    rep_clip: Option<f64>,
) -> Result<(f64, f64)> {
    let pa = a.representations(rad, rep_clip)?;
    let pb = b.representations(rad, rep_clip)?;
    Ok((crate::numkit::frobenius_norm(&pa.sub(&pb)?), encoder_distance(a, b)))
}

/// Views of the whole shard used to evaluate the objective for reporting.
pub fn eval_views(shard: &Matrix, cfg: &LocalConfig, ctx: &StreamContext) -> Result<ViewPair> {
    augment(shard, &cfg.step.augment, &ctx.stream(Purpose::EvalViews, 0, 0))
}

/// Runs `cfg.epochs` epochs of minibatch steps, each followed by one EMA
/// update. The reference stays fixed throughout.
pub fn local_training(
    model: ClientModel,
    shard: &Matrix,
    rad: &Matrix,
    reference: Option<&Reference>,
    cfg: &LocalConfig,
    ctx: &StreamContext,
) -> Result<LocalOutcome> {
    if shard.rows() == 0 {
        return Err(Error::Config(format!("client {} has an empty shard", ctx.client)));
    }
    let mut model = model;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let at = |e: Error| e.context(format!("epoch {epoch}"));
        let plan = batches(shard.rows(), cfg.batch_size, &mut ctx.stream(Purpose::BatchOrder, epoch, 0));

        let probe_views = if cfg.probes {
            Some(augment(shard, &cfg.step.augment, &ctx.stream(Purpose::Probe, epoch, 0)).map_err(at)?)
        } else {
            None
        };
        let start = model.clone();

        let mut sum = LossParts::default();
        let mut grad_sum = 0.0;
        let mut grad_max: f64 = 0.0;
        let mut batch_views = Vec::with_capacity(plan.len());
        for (b, idx) in plan.iter().enumerate() {
            let batch = shard.select_rows(idx);
            let views = augment(&batch, &cfg.step.augment, &ctx.stream(Purpose::Augment, epoch, b as u64))
                .map_err(|e| at(e.context(format!("batch {b}"))))?;
            let (next, report) = step_on_views(model, &views, rad, reference, &cfg.step)
                .map_err(|e| at(e.context(format!("batch {b}"))))?;
            model = next;
            sum.ssl += report.loss.ssl;
            sum.prox += report.loss.prox;
            sum.total += report.loss.total;
            grad_sum += report.grad_norm;
            grad_max = grad_max.max(report.grad_norm);
            if cfg.probes {
                batch_views.push(views);
            }
        }
        let steps = plan.len() as f64;

        let probe = match probe_views {
            None => None,
            Some(pv) => Some(
                epoch_probe(&start, &model, &pv, &batch_views, rad, reference, cfg).map_err(at)?,
            ),
        };

        model = model.ema_update(cfg.tau).map_err(at)?;
        let reps = model.representations(rad, cfg.step.loss.rep_clip).map_err(at)?;
        let rep_norm_max = reps.row_norms().into_iter().fold(0.0, f64::max);
        epochs.push(EpochRecord {
            epoch,
            steps: plan.len(),
            loss: LossParts {
                ssl: sum.ssl / steps,
                prox: sum.prox / steps,
                total: sum.total / steps,
            },
            grad_norm_mean: grad_sum / steps,
            grad_norm_max: grad_max,
            rep_norm_max,
            probe,
        });
    }
    Ok(LocalOutcome { model, epochs })
}

fn epoch_probe(
    start: &ClientModel,
    end: &ClientModel,
    views: &ViewPair,
    batch_views: &[ViewPair],
    rad: &Matrix,
    reference: Option<&Reference>,
    cfg: &LocalConfig,
) -> Result<EpochProbe> {
    let loss_cfg = &cfg.step.loss;
    let (loss_start, g_start) = objective_grad(start, views, rad, reference, loss_cfg)?;
    // The end point is evaluated with the start point's target network: the
    // EMA update has not happened yet.
    let (loss_end, g_end) = objective_grad(end, views, rad, reference, loss_cfg)?;
    let mut diff = g_end.clone();
    diff.axpy(-1.0, &g_start)?;

    let mut sigma2 = 0.0;
    let mut samples = 0;
    let stochastic = batch_views.len() > 1 || !cfg.step.augment.is_identity();
    if stochastic {
        for bv in batch_views {
            let (_, g) = objective_grad(start, bv, rad, reference, loss_cfg)?;
            sigma2 += g.distance(&g_start).powi(2);
            samples += 1;
        }
        sigma2 /= samples.max(1) as f64;
    }

    let (rep_change, encoder_change) = representation_change(start, end, rad, loss_cfg.rep_clip)?;
    Ok(EpochProbe {
        loss_start,
        loss_end,
        grad_norm_full: g_start.norm(),
        grad_norm_full_end: g_end.norm(),
        grad_change: diff.norm(),
        param_change: end.online.distance(&start.online),
        encoder_change,
        rep_change,
        sigma2,
        variance_samples: samples,
    })
}

/// Objective of `model` on `views` against `reference`; used for the
/// before, after and after-swap measurements of a round.
pub fn measure(
    model: &ClientModel,
    views: &ViewPair,
    rad: &Matrix,
    reference: Option<&Reference>,
    cfg: &LocalConfig,
) -> Result<LossParts> {
    objective(model, views, rad, reference, &cfg.step.loss)
}
