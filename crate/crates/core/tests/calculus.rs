use insiderlab::calculus::{ito_integral, quadratic_variation, stochastic_exponential};
use insiderlab::engine::ProcessTrack;
use proptest::collection::vec;
use proptest::prelude::*;

fn track(label: &str, rows: &[Vec<f64>]) -> ProcessTrack {
    ProcessTrack::from_rows(label, rows).unwrap()
}

/// Rows of equal length with bounded entries.
fn rows(n_paths: usize, n_nodes: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    vec(vec(-5.0f64..5.0, n_nodes), n_paths)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ito_integral_is_linear_in_the_integrand(
        (h1, h2, y) in (1usize..5, 2usize..40).prop_flat_map(|(p, n)| (rows(p, n), rows(p, n), rows(p, n))),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let (h1, h2, y) = (track("H1", &h1), track("H2", &h2), track("Y", &y));
        let combo = h1.zip_with(&h2, "aH1+bH2", |u, v| a * u + b * v).unwrap();
        let lhs = ito_integral(&combo, &y).unwrap();
        let i1 = ito_integral(&h1, &y).unwrap();
        let i2 = ito_integral(&h2, &y).unwrap();
        for ((l, u), v) in lhs.values().iter().zip(i1.values()).zip(i2.values()) {
            prop_assert!(close(*l, a * u + b * v, 1e-12), "{l} vs {}", a * u + b * v);
        }
    }

    #[test]
    fn stochastic_exponential_follows_the_discrete_recursion(
        y in (1usize..4, 2usize..60).prop_flat_map(|(p, n)| vec(vec(-0.3f64..0.3, n), p)),
    ) {
        let y: Vec<Vec<f64>> = y.into_iter().map(|r| r.iter().map(|v| v - r[0]).collect()).collect();
        let y = track("Y", &y);
        let z = stochastic_exponential(&y).unwrap();
        for p in 0..y.n_paths() {
            let (yr, zr) = (y.row(p), z.row(p));
            prop_assert_eq!(zr[0], 1.0);
            for i in 0..yr.len() - 1 {
                let dy = yr[i + 1] - yr[i];
                let expected = zr[i] * (dy - 0.5 * dy * dy).exp();
                prop_assert!(close(zr[i + 1], expected, 1e-12), "{} vs {expected}", zr[i + 1]);
            }
        }
    }

    #[test]
    fn quadratic_variation_ignores_constant_shifts(
        y in (1usize..4, 2usize..60).prop_flat_map(|(p, n)| rows(p, n)),
        c in -10.0f64..10.0,
    ) {
        let y = track("Y", &y);
        let shifted = y.map("Y+c", |v| v + c);
        let (q, qs) = (quadratic_variation(&y), quadratic_variation(&shifted));
        for (a, b) in q.values().iter().zip(qs.values()) {
            prop_assert!(close(*a, *b, 1e-11), "{a} vs {b}");
        }
    }

    #[test]
    fn integrals_associate(
        (h, k, y) in (1usize..4, 2usize..40).prop_flat_map(|(p, n)| (rows(p, n), rows(p, n), rows(p, n))),
    ) {
        let (h, k, y) = (track("H", &h), track("K", &k), track("Y", &y));
        let inner = ito_integral(&k, &y).unwrap();
        let lhs = ito_integral(&h, &inner).unwrap();
        let hk = h.zip_with(&k, "HK", |a, b| a * b).unwrap();
        let rhs = ito_integral(&hk, &y).unwrap();
        for p in 0..h.n_paths() {
            let scale: f64 = (0..h.n_nodes())
                .map(|i| (hk.get(p, i) * y.get(p, i)).abs())
                .sum::<f64>()
                .max(1.0);
            for i in 0..h.n_nodes() {
                prop_assert!((lhs.get(p, i) - rhs.get(p, i)).abs() <= 1e-12 * scale * 32.0);
            }
        }
    }
}

#[test]
fn exponential_of_a_flat_track_is_one() {
    let y = ProcessTrack::zeros("Y", 3, 10);
    let z = stochastic_exponential(&y).unwrap();
    assert!(z.values().iter().all(|&v| v == 1.0));
}

#[test]
fn exponential_rejects_a_nonzero_start() {
    let y = ProcessTrack::constant("Y", 1, 4, 0.7);
    assert!(stochastic_exponential(&y).is_err());
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = ProcessTrack::zeros("A", 2, 5);
    let b = ProcessTrack::zeros("B", 2, 6);
    assert!(ito_integral(&a, &b).is_err());
}
