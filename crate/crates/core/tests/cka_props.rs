use hssfl::cka::{aggregate_grams, gram_linear, linear_cka, proximal_grad, GramMatrix, ProximalForm, Reference, Weighted};
use hssfl::numkit::{frobenius_inner, Matrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (2usize..7, 1usize..5, 1usize..5).prop_flat_map(|(l, a, b)| (matrix(l, a), matrix(l, b)))
}

fn nonzero(m: &Matrix) -> bool {
    m.as_slice().iter().any(|x| x.abs() > 1e-3)
}

/// Brute-force Cauchy-Schwarz over matrix entries.
fn cs_ratio(a: &GramMatrix, b: &GramMatrix) -> f64 {
    let (x, y) = (a.entries().as_slice(), b.entries().as_slice());
    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
    let nx: f64 = x.iter().map(|p| p * p).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|q| q * q).sum::<f64>().sqrt();
    dot / (nx * ny)
}

proptest! {
    #[test]
    fn cka_in_unit_interval_and_matches_cauchy_schwarz((a, b) in pair()) {
        prop_assume!(nonzero(&a) && nonzero(&b));
        let (ka, kb) = (gram_linear(&a).unwrap(), gram_linear(&b).unwrap());
        let c = linear_cka(&ka, &kb).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c), "{c}");
        prop_assert!((c - cs_ratio(&ka, &kb)).abs() < 1e-12);
    }

    #[test]
    fn cka_is_one_for_proportional_grams(a in matrix(5, 3), c in 0.01f64..50.0) {
        prop_assume!(nonzero(&a));
        let ka = gram_linear(&a).unwrap();
        let kc = GramMatrix::new(ka.entries().scale(c).unwrap()).unwrap();
        prop_assert!((linear_cka(&ka, &kc).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_below_one_when_not_proportional(a in matrix(4, 2), b in matrix(4, 2)) {
        prop_assume!(nonzero(&a) && nonzero(&b));
        let (ka, kb) = (gram_linear(&a).unwrap(), gram_linear(&b).unwrap());
        let ratio = cs_ratio(&ka, &kb);
        prop_assume!(ratio < 1.0 - 1e-6);
        prop_assert!(linear_cka(&ka, &kb).unwrap() < 1.0);
    }

    #[test]
    fn gram_is_symmetric_psd_diagonal(a in matrix(4, 3)) {
        let k = gram_linear(&a).unwrap();
        for i in 0..4 {
            prop_assert!(k.entries().get(i, i) >= 0.0);
            for j in 0..4 {
                prop_assert_eq!(k.entries().get(i, j), k.entries().get(j, i));
            }
        }
    }

    #[test]
    fn uniform_aggregate_of_identical_grams_is_identity_map(a in matrix(4, 2), n in 1usize..6) {
        let k = gram_linear(&a).unwrap();
        let parts: Vec<_> = (0..n).map(|c| Weighted { client: c, weight: 1.0 / n as f64, value: &k }).collect();
        let agg = aggregate_grams(&parts).unwrap();
        for (x, y) in agg.entries().as_slice().iter().zip(k.entries().as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn raw_cka_gradient_is_scale_orthogonal(a in matrix(5, 3), c in 0.1f64..10.0) {
        prop_assume!(nonzero(&a));
        let kbar = GramMatrix::new(gram_linear(&a).unwrap().entries().scale(c).unwrap()).unwrap();
        let g = proximal_grad(&a, &Reference::Kernel(kbar), ProximalForm::RawCka).unwrap();
        let scale = g.max_abs().max(1.0) * a.max_abs().max(1.0);
        prop_assert!(frobenius_inner(&g, &a).unwrap().abs() < 1e-8 * scale);
    }

    #[test]
    fn csv_round_trip_is_exact(m in matrix(3, 4)) {
        prop_assert_eq!(Matrix::from_csv(&m.to_csv()).unwrap(), m);
    }
}
