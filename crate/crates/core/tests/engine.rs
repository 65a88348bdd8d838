use insiderlab::engine::{sample_brownian, sample_brownian_paths, Stream, TimeGrid};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn tracks_do_not_depend_on_thread_count(
        seed in any::<u64>(),
        n_paths in 1usize..40,
        n_steps in 1usize..64,
        antithetic in any::<bool>(),
    ) {
        let grid = TimeGrid::new(1.0, n_steps).unwrap();
        let one = pool(1).install(|| sample_brownian(&grid, n_paths, seed, antithetic).unwrap());
        let three = pool(3).install(|| sample_brownian(&grid, n_paths, seed, antithetic).unwrap());
        for label in ["W", "dW"] {
            prop_assert_eq!(one.get(label).unwrap().values(), three.get(label).unwrap().values());
        }
    }

    #[test]
    fn paths_agree_across_ensemble_sizes(
        seed in any::<u64>(),
        n in 1usize..30,
        m in 1usize..30,
        n_steps in 1usize..32,
    ) {
        let grid = TimeGrid::new(2.0, n_steps).unwrap();
        let a = sample_brownian(&grid, n, seed, false).unwrap();
        let b = sample_brownian(&grid, m, seed, false).unwrap();
        let (wa, wb) = (a.get("W").unwrap(), b.get("W").unwrap());
        for p in 0..n.min(m) {
            prop_assert_eq!(wa.row(p), wb.row(p));
        }
    }

    #[test]
    fn a_block_reproduces_the_same_global_paths(
        seed in any::<u64>(),
        start in 0usize..50,
        len in 1usize..20,
    ) {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let full = sample_brownian(&grid, start + len, seed, false).unwrap();
        let block = sample_brownian_paths(&grid, start..start + len, seed, false, Stream::Brownian, "W").unwrap();
        for p in 0..len {
            prop_assert_eq!(block.get("W").unwrap().row(p), full.get("W").unwrap().row(start + p));
        }
    }
}

#[test]
fn terminal_level_passes_kolmogorov_smirnov_at_one_percent() {
    let n = 20_000;
    let horizon = 2.0;
    let grid = TimeGrid::new(horizon, 32).unwrap();
    let ens = sample_brownian(&grid, n, 2024, false).unwrap();
    let mut z: Vec<f64> = ens
        .get("W")
        .unwrap()
        .terminal()
        .iter()
        .map(|w| w / horizon.sqrt())
        .collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / (n as f64).sqrt();
    assert!(d < critical, "KS statistic {d} >= {critical}");
}

#[test]
fn streams_are_independent_of_each_other() {
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let w1 = sample_brownian_paths(&grid, 0..4000, 5, false, Stream::Brownian, "W").unwrap();
    let w2 = sample_brownian_paths(&grid, 0..4000, 5, false, Stream::SecondDriver, "W").unwrap();
    let a = w1.get("W").unwrap().terminal();
    let b = w2.get("W").unwrap().terminal();
    let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
    assert!(corr.abs() < 4.0 / (a.len() as f64).sqrt(), "{corr}");
}
