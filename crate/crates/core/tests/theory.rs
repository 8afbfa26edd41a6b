mod common;

use common::mixture;
use hssfl::cka::ProximalForm;
use hssfl::federation::{run_training, FedConfig, RoundLog};
use hssfl::sslnet::{Activation, AugmentConfig, MlpSpec};
use hssfl::theory::{
    check_log, estimate_constants, estimate_smoothness, eta_max_lemma1, eta_max_theorem, lemma1_check, lemma2_check,
    mu_max_theorem, theorem_check, AssumptionEstimates, LocalTrace, Objective,
};
use hssfl::Error;
use proptest::prelude::*;

struct Quadratic(Vec<f64>);

impl Objective for Quadratic {
    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.0).map(|(x, c)| c * x).collect()
    }
}

/// Trace of `E` gradient steps on `f(w) = c w² / 2` from `w0`.
fn quadratic_trace(c: f64, w0: f64, eta: f64, epochs: usize) -> LocalTrace {
    let f = |w: f64| 0.5 * c * w * w;
    let mut w = w0;
    let mut grad_norms = Vec::new();
    for _ in 0..epochs {
        let g = c * w;
        grad_norms.push(g.abs());
        w -= eta * g;
    }
    LocalTrace {
        l0: f(w0),
        le: f(w),
        grad_norms,
    }
}

fn probe_config(seed: u64) -> FedConfig {
    FedConfig {
        clients: 2,
        rounds: 3,
        local_epochs: 2,
        batch_size: None,
        momentum: 0.0,
        augment: AugmentConfig::NONE,
        rep_clip: Some(1.0),
        theory_probes: true,
        rad_size: 16,
        proximal: ProximalForm::TraceAlignment,
        mu: 1e-3,
        seed,
        architectures: vec![
            MlpSpec::new(vec![32, 16, 8], Activation::Tanh).unwrap(),
            MlpSpec::new(vec![32, 16, 16], Activation::Tanh).unwrap(),
        ],
        ..FedConfig::default()
    }
}

#[test]
fn quadratic_smoothness_is_recovered() {
    let c = 3.7;
    let points: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3 - 0.8, 1.0 / (i + 1) as f64]).collect();
    let est = estimate_smoothness(&Quadratic(vec![c, c]), &points).unwrap();
    assert!((est.value - c).abs() < 1e-6);
    let aniso = estimate_smoothness(&Quadratic(vec![1.0, c]), &points).unwrap();
    assert!(aniso.value <= c + 1e-12);
}

#[test]
fn frozen_checkpoints_have_no_smoothness_estimate() {
    let same = vec![vec![0.5, 0.5]; 3];
    let err = estimate_smoothness(&Quadratic(vec![1.0, 1.0]), &same).unwrap_err();
    assert!(matches!(err, Error::InsufficientProbes(_)));
}

#[test]
fn quadratic_descent_bound_is_tight_in_closed_form() {
    let c = 2.0;
    let est = AssumptionEstimates::exact(c, 1.0, 0.0, 1.0, 1.0);
    for &eta in &[0.05, 0.2, 0.49] {
        let trace = quadratic_trace(c, 1.5, eta, 1);
        let r = lemma1_check(&trace, eta, &est).unwrap();
        let closed = 0.5 * c * 1.5f64.powi(2) * (1.0 - eta * c).powi(2);
        assert!((r.lhs - closed).abs() < 1e-12);
        assert!(r.holds);
        assert!(r.slack.abs() < 1e-12, "slack {}", r.slack);
    }
}

#[test]
fn bound_holds_below_threshold_and_descent_fails_above() {
    let c = 4.0;
    let est = AssumptionEstimates::exact(c, 1.0, 0.0, 1.0, 1.0);
    for epochs in 1..4 {
        for k in 1..20 {
            let eta = k as f64 / 20.0 * (2.0 / c);
            let trace = quadratic_trace(c, 0.7, eta, epochs);
            let r = lemma1_check(&trace, eta, &est).unwrap();
            assert!(r.holds && r.slack >= -1e-12, "eta {eta}");
            assert!(eta < eta_max_lemma1(trace.grad_sq_sum(), epochs, &est).unwrap());
            assert!(trace.le < trace.l0);
        }
    }
    let eta = 2.5 / c;
    let trace = quadratic_trace(c, 0.7, eta, 2);
    assert!(eta > eta_max_lemma1(trace.grad_sq_sum(), 2, &est).unwrap());
    assert!(trace.le > trace.l0, "no descent above 2/L1");
    let under = AssumptionEstimates::exact(c / 2.0, 1.0, 0.0, 1.0, 1.0);
    assert!(!lemma1_check(&trace, eta, &under).unwrap().holds);
}

#[test]
fn zero_step_has_no_slack() {
    let trace = LocalTrace {
        l0: 1.25,
        le: 1.25,
        grad_norms: vec![0.3, 0.3],
    };
    let est = AssumptionEstimates::exact(3.0, 1.0, 0.2, 1.0, 1.0);
    let r = lemma1_check(&trace, 0.0, &est).unwrap();
    assert_eq!((r.lhs, r.rhs), (1.25, 1.25));
}

#[test]
fn plug_in_thresholds() {
    let est = AssumptionEstimates::exact(2.0, 1.0, 0.0, 1.0, 1.0);
    assert_eq!(eta_max_lemma1(4.0, 1, &est).unwrap(), 1.0);
    let noisy = AssumptionEstimates::exact(2.0, 1.0, 2.0, 1.0, 1.0);
    assert_eq!(eta_max_lemma1(4.0, 2, &noisy).unwrap(), 0.5);
    assert_eq!(mu_max_theorem(4.0, 2, &est).unwrap(), 0.5);
    assert!(matches!(
        eta_max_lemma1(0.0, 1, &est),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn theorem_without_proximal_weight_is_lemma_one() {
    let trace = quadratic_trace(3.0, 1.0, 0.1, 3);
    let est = AssumptionEstimates::exact(3.0, 2.0, 0.1, 1.5, 1.0);
    let l1 = lemma1_check(&trace, 0.1, &est).unwrap();
    let th = theorem_check(&trace, 0.0, 0.1, 0.0, &est, 16).unwrap();
    assert_eq!((th.bound.lhs, th.bound.rhs), (l1.lhs, l1.rhs));
    assert!(th.mu_ok);
    assert_eq!(th.eta_threshold, eta_max_lemma1(trace.grad_sq_sum(), 3, &est).unwrap());
}

#[test]
fn zero_weight_swap_has_zero_bound() {
    let est = AssumptionEstimates::exact(3.0, 2.0, 0.1, 1.5, 1.0);
    let r = lemma2_check(0.8, 0.8, 0.0, 0.1, &est, 64);
    assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
    assert!(r.holds);
}

#[test]
fn frozen_clients_see_no_swap_jump() {
    let cfg = FedConfig {
        eta: 0.0,
        ..probe_config(1)
    };
    let out = run_training(&cfg, &mixture(1, 20)).unwrap();
    for rec in out.log.clients() {
        assert_eq!(rec.loss_after_swap.total, rec.loss_after.total);
    }
}

#[test]
fn full_batch_runs_have_zero_variance() {
    let out = run_training(&probe_config(2), &mixture(2, 20)).unwrap();
    let est = estimate_constants(&out.log).unwrap();
    assert_eq!(est.sigma2.value, 0.0);
    assert!(est.sigma2.samples > 0);
    assert!(est.r.value <= 1.0 + 1e-12);
    for e in [est.l1, est.l2, est.p, est.r] {
        assert!(e.value > 0.0 && e.samples > 0 && e.argmax.is_some());
    }
}

#[test]
fn reports_are_recomputable_from_the_log_text() {
    let out = run_training(&probe_config(3), &mixture(3, 20)).unwrap();
    let text = out.log.to_jsonl().unwrap();
    let reread = RoundLog::from_jsonl(&text).unwrap();
    let a = check_log(&out.log, None).unwrap();
    let b = check_log(&reread, None).unwrap();
    assert_eq!(a, b);
    assert!(a.lemma2.iter().all(|r| !r.informational));
    assert_eq!(a.lemma1.len(), 2 * 3);
}

#[test]
fn logs_without_probes_ask_for_them() {
    let cfg = FedConfig {
        theory_probes: false,
        ..probe_config(4)
    };
    let out = run_training(&cfg, &mixture(4, 20)).unwrap();
    let err = check_log(&out.log, None).unwrap_err();
    assert!(err.to_string().contains("--theory-probes"), "{err}");
}

#[test]
fn non_trace_forms_are_informational() {
    let cfg = FedConfig {
        proximal: ProximalForm::OneMinusCka,
        ..probe_config(5)
    };
    let out = run_training(&cfg, &mixture(5, 20)).unwrap();
    let rep = check_log(&out.log, None).unwrap();
    assert!(rep.lemma2.iter().all(|r| r.informational));
}

fn estimates(l1: f64, sigma2: f64, l2: f64, p: f64, r: f64) -> AssumptionEstimates {
    AssumptionEstimates::exact(l1, l2, sigma2, p, r)
}

proptest! {
    #[test]
    fn step_threshold_decreases_in_l1_sigma_and_epochs(
        s in 0.01f64..100.0, l1 in 0.01f64..50.0, sigma2 in 0.0f64..10.0, e in 1usize..10,
        bump in 0.01f64..5.0,
    ) {
        let base = eta_max_lemma1(s, e, &estimates(l1, sigma2, 1.0, 1.0, 1.0)).unwrap();
        prop_assert!(eta_max_lemma1(s, e, &estimates(l1 + bump, sigma2, 1.0, 1.0, 1.0)).unwrap() < base);
        prop_assert!(eta_max_lemma1(s, e, &estimates(l1, sigma2 + bump, 1.0, 1.0, 1.0)).unwrap() < base);
        if sigma2 > 0.0 {
            prop_assert!(eta_max_lemma1(s, e + 1, &estimates(l1, sigma2, 1.0, 1.0, 1.0)).unwrap() < base);
        }
        prop_assert!(base <= 2.0 / l1 + 1e-12);
    }

    #[test]
    fn weight_threshold_decreases_in_constants_and_rad_size(
        s in 0.01f64..100.0, l2 in 0.01f64..5.0, p in 0.01f64..5.0, r in 0.01f64..2.0, l in 2usize..300,
        bump in 0.01f64..2.0,
    ) {
        let base = mu_max_theorem(s, l, &estimates(1.0, 0.0, l2, p, r)).unwrap();
        prop_assert!(mu_max_theorem(s, l, &estimates(1.0, 0.0, l2 + bump, p, r)).unwrap() < base);
        prop_assert!(mu_max_theorem(s, l, &estimates(1.0, 0.0, l2, p + bump, r)).unwrap() < base);
        prop_assert!(mu_max_theorem(s, l, &estimates(1.0, 0.0, l2, p, r + bump)).unwrap() < base);
        prop_assert!(mu_max_theorem(s, l + 1, &estimates(1.0, 0.0, l2, p, r)).unwrap() < base);
        prop_assert!(mu_max_theorem(s + bump, l, &estimates(1.0, 0.0, l2, p, r)).unwrap() > base);
    }

    #[test]
    fn theorem_step_threshold_shrinks_with_weight(
        s in 0.1f64..10.0, mu in 0.0f64..1.0, bump in 0.01f64..1.0,
    ) {
        let est = estimates(2.0, 0.1, 1.0, 1.0, 1.0);
        let a = eta_max_theorem(s, 3, mu, 4, &est).unwrap();
        let b = eta_max_theorem(s, 3, mu + bump, 4, &est).unwrap();
        prop_assert!(b < a);
        prop_assert!((eta_max_theorem(s, 3, 0.0, 4, &est).unwrap() - eta_max_lemma1(s, 3, &est).unwrap()).abs() < 1e-12);
    }
}
