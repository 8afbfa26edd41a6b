//! Empirical constants and checks of the local-descent, reference-swap and
//! per-round convergence bounds.
//!
//! Constants are observed maxima, i.e. lower bounds on the true suprema, so
//! a bound reported as holding is evidence rather than proof.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cka::ProximalForm;
use crate::error::{Error, Result};
use crate::federation::{ClientRecord, FedConfig, RoundLog};

/// Tolerance of the `holds` flag.
pub const HOLDS_TOL: f64 = 1e-9;

/// Where a maximum was observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub round: usize,
    pub client: usize,
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub samples: usize,
    pub argmax: Option<Provenance>,
}

impl Estimate {
    pub const EMPTY: Estimate = Estimate {
        value: 0.0,
        samples: 0,
        argmax: None,
    };

    pub fn exact(value: f64) -> Estimate {
        Estimate {
            value,
            samples: 1,
            argmax: None,
        }
    }

    fn offer(&mut self, v: f64, at: Provenance) {
        if !v.is_finite() {
            return;
        }
        self.samples += 1;
        if self.argmax.is_none() || v > self.value {
            self.value = v;
            self.argmax = Some(at);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionEstimates {
    pub l1: Estimate,
    pub l2: Estimate,
    pub sigma2: Estimate,
    pub p: Estimate,
    pub r: Estimate,
}

impl AssumptionEstimates {
    /// Estimates with known values, for analytic checks.
    pub fn exact(l1: f64, l2: f64, sigma2: f64, p: f64, r: f64) -> AssumptionEstimates {
        AssumptionEstimates {
            l1: Estimate::exact(l1),
            l2: Estimate::exact(l2),
            sigma2: Estimate::exact(sigma2),
            p: Estimate::exact(p),
            r: Estimate::exact(r),
        }
    }

    /// `2 L2 P R³`, the per-squared-row factor of the reference-swap bound.
    fn swap_factor(&self) -> f64 {
        2.0 * self.l2.value * self.p.value * self.r.value.powi(3)
    }
}

/// A differentiable function of a flat parameter vector.
pub trait Objective {
    fn gradient(&self, w: &[f64]) -> Vec<f64>;
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max ‖∇f(a) − ∇f(b)‖ / ‖a − b‖` over all checkpoint pairs with `a ≠ b`.
pub fn estimate_smoothness<O: Objective + ?Sized>(objective: &O, checkpoints: &[Vec<f64>]) -> Result<Estimate> {
    let grads: Vec<Vec<f64>> = checkpoints.iter().map(|w| objective.gradient(w)).collect();
    let mut est = Estimate::EMPTY;
    for i in 0..checkpoints.len() {
        for j in i + 1..checkpoints.len() {
            let dw = distance(&checkpoints[i], &checkpoints[j]);
            if dw > 0.0 {
                let at = Provenance {
                    round: i,
                    client: j,
                    epoch: None,
                };
                est.offer(distance(&grads[i], &grads[j]) / dw, at);
            }
        }
    }
    if est.samples == 0 {
        return Err(Error::InsufficientProbes(
            "smoothness needs two distinct checkpoints".into(),
        ));
    }
    Ok(est)
}

fn probes_missing() -> Error {
    Error::InsufficientProbes(
        "the log has no per-epoch probes; rerun training with --theory-probes".into(),
    )
}

/// Reads every constant off the probe records of a log.
pub fn estimate_constants(log: &RoundLog) -> Result<AssumptionEstimates> {
    let mut l1 = Estimate::EMPTY;
    let mut l2 = Estimate::EMPTY;
    let mut sigma2 = Estimate::EMPTY;
    let mut p = Estimate::EMPTY;
    let mut r = Estimate::EMPTY;
    let mut probed = false;
    for c in log.clients() {
        let round_at = Provenance {
            round: c.round,
            client: c.client,
            epoch: None,
        };
        if c.round_encoder_change > 0.0 {
            l2.offer(c.round_rep_change / c.round_encoder_change, round_at);
        }
        for e in &c.epochs {
            let at = Provenance {
                epoch: Some(e.epoch),
                ..round_at
            };
            p.offer(e.grad_norm_mean, at);
            r.offer(e.rep_norm_max, at);
            let Some(pr) = &e.probe else { continue };
            probed = true;
            if pr.param_change > 0.0 {
                l1.offer(pr.grad_change / pr.param_change, at);
            }
            if pr.encoder_change > 0.0 {
                l2.offer(pr.rep_change / pr.encoder_change, at);
            }
            sigma2.offer(pr.sigma2, at);
        }
    }
    if !probed {
        return Err(probes_missing());
    }
    if l1.samples == 0 || l2.samples == 0 {
        return Err(Error::InsufficientProbes(
            "parameters never moved between probes, so the Lipschitz constants are undefined".into(),
        ));
    }
    Ok(AssumptionEstimates { l1, l2, sigma2, p, r })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Lemma1,
    Lemma2,
    Theorem,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub eta: f64,
    pub mu: f64,
    pub epochs: usize,
    pub rad_size: usize,
    pub grad_sq_sum: f64,
    pub l1: f64,
    pub l2: f64,
    pub sigma2: f64,
    pub p: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub which: BoundKind,
    pub round: Option<usize>,
    pub client: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub slack: f64,
    /// `rhs / lhs` when `lhs > 0`.
    pub slack_ratio: Option<f64>,
    pub holds: bool,
    /// Set when the measurement does not match the setting of the bound
    /// (e.g. a reference swap under a form other than trace alignment).
    pub informational: bool,
    pub inputs: BoundInputs,
}

fn report(which: BoundKind, lhs: f64, rhs: f64, inputs: BoundInputs) -> BoundReport {
    BoundReport {
        which,
        round: None,
        client: None,
        lhs,
        rhs,
        slack: rhs - lhs,
        slack_ratio: (lhs > 0.0).then(|| rhs / lhs),
        holds: lhs <= rhs + HOLDS_TOL,
        informational: false,
        inputs,
    }
}

/// Losses and full-gradient norms of one client over one round of local
/// epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTrace {
    pub l0: f64,
    pub le: f64,
    /// `‖∇L_i‖` for epochs `0..E`.
    pub grad_norms: Vec<f64>,
}

impl LocalTrace {
    pub fn grad_sq_sum(&self) -> f64 {
        self.grad_norms.iter().map(|g| g * g).sum()
    }

    /// Trace of a logged client round. `L_0` is the objective at the round's
    /// starting weights; `L_E` adds the per-epoch decreases measured under
    /// each epoch's fixed objective, which removes the drift of the EMA
    /// target between epochs.
    pub fn from_record(rec: &ClientRecord) -> Result<LocalTrace> {
        let mut grad_norms = Vec::with_capacity(rec.epochs.len());
        let mut descent = 0.0;
        let mut l0 = None;
        for e in &rec.epochs {
            let p = e.probe.as_ref().ok_or_else(probes_missing)?;
            l0.get_or_insert(p.loss_start.total);
            descent += p.loss_end.total - p.loss_start.total;
            grad_norms.push(p.grad_norm_full);
        }
        let l0 = l0.ok_or_else(|| Error::InsufficientProbes("client round without epochs".into()))?;
        Ok(LocalTrace {
            l0,
            le: l0 + descent,
            grad_norms,
        })
    }
}

/// `η < 2Σ‖∇L_i‖² / (L1 (Σ‖∇L_i‖² + E σ²))`.
pub fn eta_max_lemma1(grad_sq_sum: f64, epochs: usize, est: &AssumptionEstimates) -> Result<f64> {
    let denom = est.l1.value * (grad_sq_sum + epochs as f64 * est.sigma2.value);
    if !(denom > 0.0) {
        return Err(Error::Degenerate(format!(
            "step-size threshold undefined: L1 = {}, gradient sum = {grad_sq_sum}, sigma2 = {}",
            est.l1.value, est.sigma2.value
        )));
    }
    Ok(2.0 * grad_sq_sum / denom)
}

/// `μ < Σ‖∇L_i‖² / (2 L2 P R³ L²)`.
pub fn mu_max_theorem(grad_sq_sum: f64, rad_size: usize, est: &AssumptionEstimates) -> Result<f64> {
    let denom = est.swap_factor() * (rad_size as f64).powi(2);
    if !(denom > 0.0) {
        return Err(Error::Degenerate("proximal-weight threshold undefined: 2 L2 P R^3 L^2 = 0".into()));
    }
    Ok(grad_sq_sum / denom)
}

/// `η < 2(Σ‖∇L_i‖² − 2μ L2 P R³ L²) / (L1 (Σ‖∇L_i‖² + E σ²))`.
pub fn eta_max_theorem(grad_sq_sum: f64, epochs: usize, mu: f64, rad_size: usize, est: &AssumptionEstimates) -> Result<f64> {
    let denom = est.l1.value * (grad_sq_sum + epochs as f64 * est.sigma2.value);
    if !(denom > 0.0) {
        return Err(Error::Degenerate("step-size threshold undefined".into()));
    }
    let swap = mu * est.swap_factor() * (rad_size as f64).powi(2);
    Ok(2.0 * (grad_sq_sum - 2.0 * swap) / denom)
}

fn inputs(trace: &LocalTrace, eta: f64, mu: f64, rad_size: usize, est: &AssumptionEstimates) -> BoundInputs {
    BoundInputs {
        eta,
        mu,
        epochs: trace.grad_norms.len(),
        rad_size,
        grad_sq_sum: trace.grad_sq_sum(),
        l1: est.l1.value,
        l2: est.l2.value,
        sigma2: est.sigma2.value,
        p: est.p.value,
        r: est.r.value,
    }
}

fn lemma1_rhs(trace: &LocalTrace, eta: f64, est: &AssumptionEstimates) -> f64 {
    let l1 = est.l1.value;
    let e = trace.grad_norms.len() as f64;
    trace.l0 - (eta - l1 * eta * eta / 2.0) * trace.grad_sq_sum() + l1 * e * eta * eta * est.sigma2.value / 2.0
}

/// `L_E ≤ L_0 − (η − L1η²/2) Σ‖∇L_i‖² + L1 E η² σ² / 2`.
pub fn lemma1_check(trace: &LocalTrace, eta: f64, est: &AssumptionEstimates) -> Result<BoundReport> {
    if trace.grad_norms.is_empty() {
        return Err(Error::InsufficientProbes("lemma 1 needs the gradient norm of every epoch".into()));
    }
    let rhs = lemma1_rhs(trace, eta, est);
    Ok(report(BoundKind::Lemma1, trace.le, rhs, inputs(trace, eta, 0.0, 0, est)))
}

fn swap_rhs(mu: f64, eta: f64, rad_size: usize, est: &AssumptionEstimates) -> f64 {
    mu * eta * est.swap_factor() * (rad_size as f64).powi(2)
}

/// `L_E' − L_E ≤ 2 μ η L2 P R³ L²` for a loss pair that differs only in the
/// reference.
pub fn lemma2_check(
    loss_before: f64,
    loss_after: f64,
    mu: f64,
    eta: f64,
    est: &AssumptionEstimates,
    rad_size: usize,
) -> BoundReport {
    let rhs = swap_rhs(mu, eta, rad_size, est);
    let trace = LocalTrace {
        l0: loss_before,
        le: loss_after,
        grad_norms: Vec::new(),
    };
    report(BoundKind::Lemma2, loss_after - loss_before, rhs, inputs(&trace, eta, mu, rad_size, est))
}

fn swap_jump(rec: &ClientRecord) -> Result<f64> {
    if (rec.loss_after_swap.ssl - rec.loss_after.ssl).abs() > 1e-12 {
        return Err(Error::Protocol(format!(
            "round {} client {}: swap losses were not measured on identical data and weights",
            rec.round, rec.client
        )));
    }
    Ok(rec.loss_after_swap.total - rec.loss_after.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub bound: BoundReport,
    pub eta_threshold: f64,
    pub mu_threshold: f64,
    pub eta_ok: bool,
    pub mu_ok: bool,
}

/// Combined per-round bound `L_E' ≤ Lemma-1 rhs + 2 μ η L2 P R³ L²`, with
/// `swap_jump = L_E' − L_E`, and the two parameter conditions.
pub fn theorem_check(
    trace: &LocalTrace,
    swap_jump: f64,
    eta: f64,
    mu: f64,
    est: &AssumptionEstimates,
    rad_size: usize,
) -> Result<TheoremReport> {
    if trace.grad_norms.is_empty() {
        return Err(Error::InsufficientProbes("the theorem needs the gradient norm of every epoch".into()));
    }
    let rhs = lemma1_rhs(trace, eta, est) + swap_rhs(mu, eta, rad_size, est);
    let lhs = trace.le + swap_jump;
    let s = trace.grad_sq_sum();
    let e = trace.grad_norms.len();
    let eta_threshold = eta_max_theorem(s, e, mu, rad_size, est)?;
    let mu_threshold = if mu == 0.0 {
        f64::INFINITY
    } else {
        mu_max_theorem(s, rad_size, est)?
    };
    Ok(TheoremReport {
        bound: report(BoundKind::Theorem, lhs, rhs, inputs(trace, eta, mu, rad_size, est)),
        eta_threshold,
        mu_threshold,
        eta_ok: eta < eta_threshold,
        mu_ok: mu < mu_threshold,
    })
}

/// All reports derivable from a log with probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub estimates: AssumptionEstimates,
    pub lemma1: Vec<BoundReport>,
    pub lemma2: Vec<BoundReport>,
    pub theorem: Vec<TheoremReport>,
}

fn locate(mut r: BoundReport, rec: &ClientRecord) -> BoundReport {
    r.round = Some(rec.round);
    r.client = Some(rec.client);
    r
}

/// Recomputes every bound from the log alone, with constants estimated
/// from the same log unless `est` is given.
pub fn check_log(log: &RoundLog, est: Option<AssumptionEstimates>) -> Result<TheoryReport> {
    let est = match est {
        Some(e) => e,
        None => estimate_constants(log)?,
    };
    let cfg: &FedConfig = &log.header.config;
    let l = log.header.rad_rows;
    let swap_informational = cfg.proximal != ProximalForm::TraceAlignment;
    let mut out = TheoryReport {
        estimates: est,
        lemma1: Vec::new(),
        lemma2: Vec::new(),
        theorem: Vec::new(),
    };
    for rec in log.clients() {
        let trace = LocalTrace::from_record(rec)?;
        out.lemma1.push(locate(lemma1_check(&trace, cfg.eta, &est)?, rec));
        let jump = swap_jump(rec)?;
        let mut r2 = locate(
            lemma2_check(rec.loss_after.total, rec.loss_after_swap.total, cfg.mu, cfg.eta, &est, l),
            rec,
        );
        r2.informational = swap_informational;
        out.lemma2.push(r2);
        let mut th = theorem_check(&trace, jump, cfg.eta, cfg.mu, &est, l)?;
        th.bound = locate(th.bound, rec);
        th.bound.informational = swap_informational && cfg.mu > 0.0;
        out.theorem.push(th);
    }
    Ok(out)
}

impl TheoryReport {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "{}", serde_json::to_string(&self.estimates)?);
        for r in self.lemma1.iter().chain(&self.lemma2) {
            let _ = writeln!(out, "{}", serde_json::to_string(r)?);
        }
        for t in &self.theorem {
            let _ = writeln!(out, "{}", serde_json::to_string(t)?);
        }
        Ok(out)
    }

    /// Human-readable summary table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let e = &self.estimates;
        let _ = writeln!(
            out,
            "constants (observed maxima): L1={:.4e} L2={:.4e} sigma2={:.4e} P={:.4e} R={:.4e}",
            e.l1.value, e.l2.value, e.sigma2.value, e.p.value, e.r.value
        );
        let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>14}", "bound", "events", "holds", "min slack/lhs");
        let theorem: Vec<BoundReport> = self.theorem.iter().map(|t| t.bound).collect();
        for (name, reports) in [("lemma1", &self.lemma1), ("lemma2", &self.lemma2), ("theorem", &theorem)] {
            let holds = reports.iter().filter(|r| r.holds).count();
            let ratio = reports
                .iter()
                .filter_map(|r| r.slack_ratio)
                .fold(f64::INFINITY, f64::min);
            let ratio = if ratio.is_finite() { format!("{ratio:.3e}") } else { "-".into() };
            let _ = writeln!(out, "{name:<8} {:>7} {holds:>7} {ratio:>14}", reports.len());
        }
        let eta_ok = self.theorem.iter().filter(|t| t.eta_ok).count();
        let mu_ok = self.theorem.iter().filter(|t| t.mu_ok).count();
        let _ = writeln!(
            out,
            "theorem conditions: eta ok in {eta_ok}/{n}, mu ok in {mu_ok}/{n}",
            n = self.theorem.len()
        );
        out
    }
}

/// Mean over sampled clients of the loss after each round's reference swap.
pub fn round_mean_losses(log: &RoundLog) -> Vec<f64> {
    let rounds = log.clients().map(|c| c.round).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); rounds];
    for c in log.clients() {
        let s = &mut sums[c.round - 1];
        s.0 += c.loss_after_swap.total;
        s.1 += 1;
    }
    sums.into_iter().filter(|s| s.1 > 0).map(|(s, n)| s / n as f64).collect()
}

/// Trailing means over windows of `w` consecutive values.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    xs.windows(w).map(|win| win.iter().sum::<f64>() / w as f64).collect()
}

pub fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|p| p[1] < p[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        c: f64,
    }

    impl Objective for Quadratic {
        fn gradient(&self, w: &[f64]) -> Vec<f64> {
            w.iter().map(|x| self.c * x).collect()
        }
    }

    #[test]
    fn plug_in_thresholds() {
        let est = AssumptionEstimates::exact(2.0, 1.0, 0.0, 1.0, 1.0);
        assert_eq!(eta_max_lemma1(4.0, 1, &est).unwrap(), 1.0);
        let est2 = AssumptionEstimates::exact(2.0, 1.0, 2.0, 1.0, 1.0);
        assert_eq!(eta_max_lemma1(4.0, 2, &est2).unwrap(), 0.5);
        assert_eq!(mu_max_theorem(4.0, 2, &est).unwrap(), 0.5);
        assert!(eta_max_lemma1(0.0, 1, &est).is_err());
    }

    #[test]
    fn quadratic_smoothness_is_exact() {
        let q = Quadratic { c: 3.7 };
        let pts = vec![vec![1.0], vec![-0.4], vec![2.5], vec![0.3]];
        let est = estimate_smoothness(&q, &pts).unwrap();
        assert!((est.value - 3.7).abs() < 1e-12);
        assert_eq!(est.samples, 6);
        assert!(matches!(
            estimate_smoothness(&q, &[vec![1.0], vec![1.0]]),
            Err(Error::InsufficientProbes(_))
        ));
    }

    #[test]
    fn zero_step_is_tight() {
        let trace = LocalTrace {
            l0: 1.5,
            le: 1.5,
            grad_norms: vec![0.7],
        };
        let est = AssumptionEstimates::exact(2.0, 1.0, 0.0, 1.0, 1.0);
        let r = lemma1_check(&trace, 0.0, &est).unwrap();
        assert_eq!(r.rhs, r.lhs);
        assert!(r.holds);
    }

    #[test]
    fn swap_bound_vanishes_without_mu() {
        let est = AssumptionEstimates::exact(2.0, 3.0, 0.0, 1.0, 2.0);
        let r = lemma2_check(0.4, 0.4, 0.0, 0.1, &est, 64);
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        assert!(r.holds);
    }

    #[test]
    fn theorem_without_mu_is_lemma1() {
        let trace = LocalTrace {
            l0: 2.0,
            le: 1.2,
            grad_norms: vec![1.0, 0.8, 0.5],
        };
        let est = AssumptionEstimates::exact(4.0, 1.0, 0.1, 1.0, 1.0);
        let l1 = lemma1_check(&trace, 0.1, &est).unwrap();
        let th = theorem_check(&trace, 0.0, 0.1, 0.0, &est, 64).unwrap();
        assert_eq!((th.bound.lhs, th.bound.rhs), (l1.lhs, l1.rhs));
        assert_eq!(th.bound.holds, l1.holds);
        assert!(th.mu_ok);
    }

    #[test]
    fn moving_average_windows() {
        let ma = moving_average(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5], 5);
        assert_eq!(ma, vec![3.0, 2.1]);
        assert!(strictly_decreasing(&ma));
        assert!(!strictly_decreasing(&[1.0, 1.0]));
        assert!(moving_average(&[1.0], 5).is_empty());
    }
}
