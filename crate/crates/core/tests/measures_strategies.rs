use insiderlab::calculus::stochastic_exponential;
use insiderlab::engine::{sample_brownian, ProcessTrack, TimeGrid};
use insiderlab::measures::{martingale_defect, relative_entropy, weighted_expectation, Verdict};
use insiderlab::stats::Estimate;
use insiderlab::strategies::{run_strategy, MarketData, PositionRule, StrategySpec};
use proptest::collection::vec;
use proptest::prelude::*;

fn rule() -> impl Strategy<Value = PositionRule> {
    prop_oneof![
        Just(PositionRule::Flat),
        (-2.0f64..2.0).prop_map(|units| PositionRule::Constant { units }),
        Just(PositionRule::BuyAndHold),
        (0.0f64..0.9).prop_map(|theta| PositionRule::DrawdownThreshold { theta }),
    ]
}

fn prices() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..4, 2usize..40).prop_flat_map(|(p, n)| vec(vec(0.5f64..2.0, n), p))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn unit_density_reproduces_the_plain_mean(values in vec(-1e3f64..1e3, 2..200)) {
        let ones = vec![1.0; values.len()];
        let w = weighted_expectation(&values, &ones).unwrap();
        prop_assert_eq!(w.estimate, Estimate::from_samples(&values));
    }

    #[test]
    fn relative_entropy_is_nonnegative(raw in vec(0.01f64..5.0, 10..400)) {
        let m = raw.iter().sum::<f64>() / raw.len() as f64;
        let density: Vec<f64> = raw.iter().map(|v| v / m).collect();
        let r = relative_entropy(&density, None).unwrap();
        prop_assert!(r.h_estimate >= -3.0 * r.std_error, "{} ± {}", r.h_estimate, r.std_error);
    }

    #[test]
    fn wealth_is_the_sum_of_position_times_increment(x in prices(), rule in rule()) {
        let x = ProcessTrack::from_rows("X", &x).unwrap();
        let spec = StrategySpec::new("s", rule);
        let v = run_strategy(&spec, &MarketData::new(&x)).unwrap();
        let rm = |row: &[f64]| {
            let mut m = f64::NEG_INFINITY;
            row.iter().map(|&v| { m = m.max(v); m }).collect::<Vec<_>>()
        };
        for p in 0..x.n_paths() {
            let row = x.row(p);
            let running = rm(row);
            let ctx = insiderlab::strategies::PathContext {
                x: row,
                running_max: &running,
                g: None,
                end: row.len() - 1,
            };
            let mut gain = 0.0;
            for i in 0..ctx.end {
                gain += spec.position(&ctx, i) * (row[i + 1] - row[i]);
            }
            prop_assert_eq!(v.get(p, ctx.end), gain);
        }
    }

    #[test]
    fn doubling_the_position_doubles_the_gain(x in prices(), rule in rule(), v0 in -5.0f64..5.0) {
        let x = ProcessTrack::from_rows("X", &x).unwrap();
        let market = MarketData::new(&x);
        let one = StrategySpec::new("one", rule).with_initial_wealth(v0);
        let two = one.clone().with_units(2.0);
        let a = run_strategy(&one, &market).unwrap();
        let b = run_strategy(&two, &market).unwrap();
        for p in 0..x.n_paths() {
            let (ga, gb) = (a.get(p, market.end) - v0, b.get(p, market.end) - v0);
            prop_assert!((gb - 2.0 * ga).abs() <= 1e-12 * (1.0 + ga.abs() + v0.abs()), "{gb} vs 2*{ga}");
        }
    }
}

#[test]
fn long_only_spec_with_a_short_rule_is_rejected() {
    let x = ProcessTrack::from_rows("X", &[vec![1.0, 1.1, 0.9]]).unwrap();
    let spec = StrategySpec::new("bad", PositionRule::ShortAfterHonestTime).long_only();
    assert!(run_strategy(&spec, &MarketData::new(&x)).is_err());
}

#[test]
fn plain_stopped_exponential_has_no_defect() {
    let sigma = 0.5;
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let ens = sample_brownian(&grid, 40_000, 77, false).unwrap();
    let z = stochastic_exponential(&ens.get("W").unwrap().map("-sW", |w| -sigma * w)).unwrap();
    let report = martingale_defect(&z.terminal(), None, 0.0).unwrap();
    assert_eq!(report.verdict, Verdict::ConsistentWithMartingale, "{report:?}");
}

#[test]
fn a_density_with_missing_mass_is_strict() {
    let density: Vec<f64> = (0..10_000).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 }).collect();
    let report = martingale_defect(&density, None, 0.0).unwrap();
    assert_eq!(report.verdict, Verdict::StrictLocalMartingale);
    assert!((report.defect - 0.25).abs() < 1e-12);
}
