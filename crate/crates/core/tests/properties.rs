use glmix::em_test::{beta_update, penalty_p};
use glmix::family::{Dataset, Family};
use glmix::io::{default_columns, read_dataset, write_dataset};
use glmix::mixture::{mixture_loglik, MixingDistribution};
use glmix::nnqp::{brute_force_nnqp, solve_nnqp};
use glmix::null_dist::{chibar_pvalue, ChiBarWeights};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn spd(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |i, j| entries[i * d + j]);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.05
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn nnqp_solution_satisfies_kkt(
        d in 1usize..7,
        entries in prop::collection::vec(-2.0f64..2.0, 49),
        w_raw in prop::collection::vec(-3.0f64..3.0, 7),
    ) {
        let q = spd(d, &entries);
        let w = DVector::from_column_slice(&w_raw[..d]);
        let sol = solve_nnqp(&w, &q).unwrap();
        let dual = &w - &q * &sol.v;
        let scale = 1e-8 * (1.0 + q.amax() + w.amax());
        for k in 0..d {
            prop_assert!(sol.v[k] >= 0.0);
            prop_assert!(dual[k] <= scale, "dual {} at {}", dual[k], k);
            prop_assert!((sol.v[k] * dual[k]).abs() <= scale * (1.0 + sol.v[k]));
        }
        let oracle = brute_force_nnqp(&w, &q).unwrap();
        prop_assert_eq!(sol.support, oracle.support);
    }

    #[test]
    fn beta_update_beats_its_neighbours(w1 in 0.01f64..50.0, w2 in 0.01f64..50.0, c in 0.01f64..10.0) {
        let f = |b: f64| w1 * b.ln() + w2 * (1.0 - b).ln() + penalty_p(b, c).unwrap();
        let b = beta_update(w1, w2, c);
        prop_assert!(b > 0.0 && b < 1.0);
        for step in [1e-3, 1e-5] {
            prop_assert!(f(b) >= f(b + step) - 1e-12 && f(b) >= f(b - step) - 1e-12);
        }
    }

    #[test]
    fn penalty_is_symmetric_and_nonpositive(b in 0.001f64..0.999, c in 0.01f64..10.0) {
        let p = penalty_p(b, c).unwrap();
        prop_assert!(p <= 1e-15);
        prop_assert!((p - penalty_p(1.0 - b, c).unwrap()).abs() <= 1e-9 * p.abs().max(1.0));
    }

    #[test]
    fn pvalue_is_a_decreasing_tail(raw in prop::collection::vec(0.0f64..1.0, 2..6), t1 in 0.0f64..30.0, dt in 0.0f64..5.0) {
        let total: f64 = raw.iter().sum::<f64>().max(1e-12);
        let w = ChiBarWeights { a: raw.iter().map(|v| v / total).collect(), mc_draws: 0, seed: 0 };
        let (p1, p2) = (chibar_pvalue(t1, &w), chibar_pvalue(t1 + dt, &w));
        prop_assert!((0.0..=1.0).contains(&p1));
        prop_assert!(p2 <= p1 + 1e-15);
        prop_assert!(p1 <= 1.0 - w.a[0] + 1e-12 || t1 == 0.0);
    }

    #[test]
    fn loglik_ignores_component_order(
        alphas in prop::collection::vec(0.05f64..1.0, 3),
        thetas in prop::collection::vec(-2.0f64..2.0, 6),
        seed in 0u64..1000,
    ) {
        let total: f64 = alphas.iter().sum();
        let psi = MixingDistribution::new(
            alphas.iter().map(|a| a / total).collect(),
            thetas.chunks(2).map(<[f64]>::to_vec).collect(),
        ).unwrap();
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { ((i as u64 * 7 + seed) % 13) as f64 / 13.0 });
        let y = DVector::from_fn(n, |i, _| ((i as u64 + seed) % 5) as f64 - 2.0);
        let data = Dataset::new(y, x, DMatrix::zeros(n, 0), Family::normal(1.3).unwrap()).unwrap();
        let gamma = DVector::zeros(0);
        let a = mixture_loglik(&psi, &gamma, &data).unwrap();
        let b = mixture_loglik(&psi.permuted(&[2, 0, 1]), &gamma, &data).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn csv_round_trip_is_exact(values in prop::collection::vec(-1e12f64..1e12, 30)) {
        let n = 10;
        let y = DVector::from_column_slice(&values[..n]);
        let x = DMatrix::from_row_slice(n, 1, &values[n..2 * n]);
        let z = DMatrix::from_row_slice(n, 1, &values[2 * n..]);
        let data = Dataset::new(y, x, z, Family::normal(1.0).unwrap()).unwrap();
        let cols = default_columns(1, 1);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data, &cols).unwrap();
        prop_assert_eq!(read_dataset(buf.as_slice(), &cols, data.family()).unwrap(), data);
    }
}
