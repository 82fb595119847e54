use analog_md::annealer::gibbs_associations;
use analog_md::baselines::linear_closed_form;
use analog_md::exec::Exec;
use analog_md::numerics::build_source_grid;
use analog_md::opta::{opta_central, opta_min_cost, OptaQuery};
use analog_md::system::{Metrics, SystemConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gibbs_rows_are_distributions(
        costs in prop::collection::vec(-50.0f64..50.0, 12),
        t in 1e-6f64..1e3,
    ) {
        let q = gibbs_associations(&costs, 4, t).unwrap();
        prop_assert!(q.max_row_error() < 1e-12);
        for k in 0..3 {
            let row = q.row(k);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            // the cheapest model is the most probable
            let best = (0..4).min_by(|&a, &b| costs[k * 4 + a].total_cmp(&costs[k * 4 + b])).unwrap();
            prop_assert!(row.iter().all(|&v| v <= row[best]));
        }
    }

    #[test]
    fn source_grid_is_a_symmetric_distribution(half in 3usize..200, range in 2.0f64..8.0, var in 0.1f64..10.0) {
        let g = build_source_grid(2 * half + 1, range, var).unwrap();
        let total: f64 = g.weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let n = g.len();
        for j in 0..n {
            prop_assert!((g.points()[j] + g.points()[n - 1 - j]).abs() < 1e-12 * range * var.sqrt());
            prop_assert!((g.weights()[j] - g.weights()[n - 1 - j]).abs() < 1e-15);
        }
        prop_assert!(g.expect(|x| x).abs() < 1e-12);
    }

    #[test]
    fn central_bound_lies_between_nu_and_the_sides(
        p in 1.0f64..1000.0,
        beta in prop::sample::select(vec![0.5, 1.0]),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let q = OptaQuery::symmetric(p, beta, 0.1);
        let lb = q.side_bounds()[0];
        let (d1, d2) = (lb + a * (1.0 - lb), lb + b * (1.0 - lb));
        let (d0, nu, phi) = opta_central(d1, d2, &q).unwrap();
        prop_assert!(phi >= 1.0);
        prop_assert!(d0 >= nu * (1.0 - 1e-12));
        prop_assert!(d0 <= d1.min(d2) * (1.0 + 1e-9));
    }

    #[test]
    fn opta_minimum_is_below_every_feasible_point(
        p in 2.0f64..200.0,
        eps in 0.0f64..0.5,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let q = OptaQuery::symmetric(p, 1.0, eps);
        let best = opta_min_cost(&q).unwrap();
        let lb = q.side_bounds()[0];
        let (d1, d2) = (lb + a * (1.0 - lb), lb + b * (1.0 - lb));
        let (d0, _, _) = opta_central(d1, d2, &q).unwrap();
        prop_assert!(best.d_total <= (1.0 - eps) * d0 + eps * (d1 + d2) + 1e-12);
    }

    #[test]
    fn linear_central_beats_both_sides(p1 in 0.1f64..1000.0, p2 in 0.1f64..1000.0, eps in 0.0f64..0.5) {
        let m = linear_closed_form(&SystemConfig::default().with_epsilon(eps), p1, p2);
        prop_assert!(m.d0 < m.d1.min(m.d2));
        prop_assert!(m.d0 >= m.d1 * m.d2 / (m.d1 + m.d2) * (1.0 - 1e-12));
        prop_assert!(m.snr_db <= 10.0 * (1.0 / m.d0).log10() + 1e-9);
    }

    #[test]
    fn metrics_text_is_exact(d in prop::array::uniform5(1e-6f64..1.0), eps in 0.0f64..0.5, lambda in 0.0f64..1.0) {
        let m = Metrics::new(d[0], d[1], d[2], 1.0 / d[3], 1.0 / d[4], eps, lambda, 1.0);
        prop_assert_eq!(Metrics::from_text(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn parallel_map_preserves_order(n in 0usize..2000) {
        let f = |i: usize| (i as f64).sin() * 1e3 + i as f64;
        prop_assert_eq!(Exec::Parallel.map(n, f), Exec::Sequential.map(n, f));
    }
}
