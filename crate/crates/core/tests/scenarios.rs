use insiderlab::density_lab::{
    defect_pair, simulate_lab, terminals, DensityLabScenario, LabPlan, LabStudy, LabVariant,
};
use insiderlab::engine::{default_chunk, TimeGrid};
use insiderlab::factorization::{
    regime_switch_check, standard_schedules, FactorizationMode, FactorizationScenario,
};
use insiderlab::honest_time::{simulate_honest_time, HonestTimeScenario};
use insiderlab::measures::Verdict;
use insiderlab::strategies::{insider_short_spec, terminal_gains, MarketData};
use proptest::prelude::*;

fn honest(sigma: f64, n_paths: usize, n_steps: usize, seed: u64) -> insiderlab::honest_time::HonestTimePaths {
    let scenario = HonestTimeScenario {
        sigma,
        ..HonestTimeScenario::default()
    };
    let grid = TimeGrid::new(scenario.sim_horizon, n_steps).unwrap();
    simulate_honest_time(&scenario, &grid, n_paths, seed, false).unwrap()
}

fn lab_scenario(variant: LabVariant) -> DensityLabScenario {
    DensityLabScenario {
        variant,
        refine_depth: 8,
        ..DensityLabScenario::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn short_at_the_honest_time_never_loses(seed in any::<u64>(), sigma in 0.1f64..1.0) {
        let p = honest(sigma, 64, 128, seed);
        let market = MarketData {
            x: &p.x,
            running_max: Some(&p.s),
            honest_time: Some(&p.g),
            end: p.horizon_index,
        };
        let gains = terminal_gains(&insider_short_spec(), &market).unwrap();
        prop_assert!(gains.iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn information_drift_changes_sign_at_the_honest_time(seed in any::<u64>()) {
        let p = honest(0.4, 32, 128, seed);
        for k in 0..p.n_paths() {
            let g = p.g[k].unwrap_or(usize::MAX);
            for i in 0..p.horizon_index {
                let a = p.alpha.get(k, i);
                if i < g {
                    prop_assert!(a > 0.0, "path {k} node {i} before g={g}: {a}");
                } else if i > g {
                    prop_assert!(a < 0.0, "path {k} node {i} after g={g}: {a}");
                }
            }
        }
    }

    #[test]
    fn drift_identity_holds_pathwise(seed in any::<u64>()) {
        let p = honest(0.3, 16, 256, seed);
        prop_assert!(p.drift_identity_error() < 1e-9);
    }

    #[test]
    fn lab_tracks_freeze_after_the_stop(seed in any::<u64>(), stopped in any::<bool>()) {
        let variant = if stopped { LabVariant::Stopped { a: 0.3 } } else { LabVariant::Absorbing };
        let scenario = DensityLabScenario { x0: 1.0, ..lab_scenario(variant) };
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let p = simulate_lab(&scenario, &grid, 32, seed, false).unwrap();
        for k in 0..32 {
            if let Some(s) = p.stops[k].index {
                for t in [&p.d, &p.r, &p.r_plus, &p.g] {
                    let row = t.row(k);
                    prop_assert!(row[s..].iter().all(|&v| v == row[s]), "{} moves after {s}", t.label());
                }
            }
        }
    }

    #[test]
    fn lab_densities_are_positive_and_start_at_one(seed in any::<u64>()) {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let p = simulate_lab(&lab_scenario(LabVariant::Absorbing), &grid, 32, seed, false).unwrap();
        for t in [&p.r, &p.r_plus] {
            for k in 0..32 {
                prop_assert_eq!(t.get(k, 0), 1.0);
                prop_assert!(t.row(k).iter().all(|&v| v > 0.0 && v.is_finite()));
            }
        }
    }
}

#[test]
fn density_times_r_is_close_to_one_before_the_stop() {
    let grid = TimeGrid::new(1.0, 1024).unwrap();
    let study = LabStudy::run(
        &lab_scenario(LabVariant::Stopped { a: 0.5 }),
        &grid,
        2000,
        3,
        false,
        LabPlan {
            richardson: false,
            ..LabPlan::default()
        },
        default_chunk(grid.n_nodes()),
    )
    .unwrap();
    assert!(study.max_factorization_error() < 0.5, "{}", study.max_factorization_error());
}

#[test]
fn degenerate_lab_has_unit_densities_and_coherent_verdicts() {
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let p = simulate_lab(&lab_scenario(LabVariant::Degenerate), &grid, 500, 1, false).unwrap();
    assert!(p.r.values().iter().all(|&v| v == 1.0));
    assert!(p.r_plus.values().iter().all(|&v| v == 1.0));
    let pair = defect_pair(&terminals(&p), None).unwrap();
    assert!(pair.coherent());
    assert_eq!(pair.r.verdict, Verdict::ConsistentWithMartingale);
}

#[test]
fn verdicts_are_stable_when_the_ensemble_doubles() {
    let grid = TimeGrid::new(1.0, 256).unwrap();
    for (variant, expected) in [
        (LabVariant::Absorbing, Verdict::StrictLocalMartingale),
        (LabVariant::Stopped { a: 0.5 }, Verdict::ConsistentWithMartingale),
    ] {
        for n in [10_000, 20_000] {
            let study = LabStudy::run(
                &lab_scenario(variant),
                &grid,
                n,
                17,
                false,
                LabPlan::default(),
                default_chunk(grid.n_nodes()),
            )
            .unwrap();
            let pair = study.defect_pair().unwrap();
            assert_eq!(pair.r.verdict, expected, "{variant:?} at {n}");
            assert_eq!(pair.r_plus.verdict, expected, "{variant:?} at {n}");
        }
    }
}

#[test]
fn stopped_lab_passes_the_immersion_check() {
    let grid = TimeGrid::new(1.0, 256).unwrap();
    let study = LabStudy::run(
        &lab_scenario(LabVariant::Stopped { a: 0.5 }),
        &grid,
        20_000,
        23,
        false,
        LabPlan::default(),
        default_chunk(grid.n_nodes()),
    )
    .unwrap();
    let report = study.immersion_check().unwrap();
    assert!(report.passed, "max |t| = {}", report.max_abs_t);
}

#[test]
fn regime_factors_multiply_to_the_whole_exponential() {
    let scenario = FactorizationScenario {
        mode: FactorizationMode::RegimeSwitch {
            sigma: 0.3,
            schedules: standard_schedules(1.0),
        },
        horizon: 1.0,
    };
    let errors = |steps: usize| {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let r = regime_switch_check(&scenario, &grid, 2000, 8, false).unwrap();
        for e in &r.entries {
            assert!(e.cross_variation.mean.abs() <= 1e-15, "{:?}", e.cross_variation);
        }
        r.entries
            .iter()
            .map(|e| e.max_factorization_error)
            .fold(0.0, f64::max)
    };
    let (coarse, fine) = (errors(64), errors(1024));
    assert!(fine < 1e-9, "{coarse} -> {fine}");
}
