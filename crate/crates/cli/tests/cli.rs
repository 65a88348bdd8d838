use std::path::Path;

use insiderlab::density_lab::{DensityLabScenario, LabVariant};
use insiderlab::factorization::{standard_schedules, FactorizationMode, FactorizationScenario};
use insiderlab::honest_time::HonestTimeScenario;
use insiderlab_cli::config::{
    AnalysisBlock, EngineBlock, Format, OutputBlock, RunConfig, ScenarioBlock,
};
use insiderlab_cli::{parse_config, parse_report, run, run_cli, Command};
use proptest::prelude::*;

fn honest(n_paths: usize, n_steps: usize) -> RunConfig {
    RunConfig {
        scenario: ScenarioBlock {
            honest_time: Some(HonestTimeScenario {
                sigma: 0.3,
                horizon: 1.0,
                sim_horizon: 8.0,
                trunc_eps: 0.01,
                floor_eps: 1e-12,
                resolve_tail: true,
            }),
            ..Default::default()
        },
        engine: EngineBlock {
            n_paths,
            n_steps,
            seed: 11,
            antithetic: false,
            chunk: None,
            threads: None,
        },
        analysis: AnalysisBlock::default(),
        output: OutputBlock::default(),
    }
}

fn lab(variant: LabVariant, n_paths: usize, n_steps: usize) -> RunConfig {
    let mut c = honest(n_paths, n_steps);
    c.scenario = ScenarioBlock {
        density_lab: Some(DensityLabScenario {
            variant,
            horizon: 1.0,
            x0: 10.0,
            refine_depth: 6,
        }),
        ..Default::default()
    };
    c
}

fn write_config(dir: &Path, config: &RunConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_json()).unwrap();
    path.to_string_lossy().into_owned()
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("insiderlab").chain(args.iter().copied()))
}

#[test]
fn valid_run_exits_zero_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = lab(LabVariant::Absorbing, 200, 64);
    c.output.dump_paths = 3;
    c.output.formats = vec![Format::Json, Format::Csv];
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("out");
    let code = cli(&["--config", &cfg, "--out", out.to_str().unwrap(), "diagnose"]);
    assert_eq!(code, 0);
    for f in ["report.json", "results.csv", "tracks.csv", "node_means.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = parse_report(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.command, "diagnose");
    assert_eq!(report.config.output.directory, out);
}

#[test]
fn track_dump_has_label_header_and_one_row_per_path_node() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = lab(LabVariant::Stopped { a: 0.5 }, 50, 16);
    c.output.dump_paths = 3;
    c.output.directory = dir.path().to_path_buf();
    let report = run(&c, Command::Simulate, Some(1)).unwrap();
    insiderlab_cli::cli::write_outputs(&report).unwrap();
    let tracks = std::fs::read_to_string(dir.path().join("tracks.csv")).unwrap();
    let lines: Vec<&str> = tracks.lines().collect();
    assert_eq!(lines[0], "path,node,t,B,X,D*,G,alpha,M,R,R+");
    assert_eq!(lines.len(), 1 + 3 * 17);
    let means = std::fs::read_to_string(dir.path().join("node_means.csv")).unwrap();
    let lines: Vec<&str> = means.lines().collect();
    assert_eq!(lines[0], "node,t,B,X,D*,G,alpha,M,R,R+");
    assert_eq!(lines.len(), 1 + 17);
    assert!(lines[1].starts_with("0,0,0,10,1,"), "{}", lines[1]);
}

#[test]
fn out_of_range_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"scenario": {"honest_time": {"sigma": 0.3, "horizon": 1.0, "sim_horizon": 8.0, "trunc_eps": 1.5}},
            "engine": {"n_paths": 10, "n_steps": 16, "seed": 1}}"#,
    )
    .unwrap();
    assert_eq!(cli(&["--config", cfg.to_str().unwrap(), "simulate"]), 1);
    assert_eq!(cli(&["simulate"]), 1);
    assert_eq!(cli(&["--bogus-flag", "simulate"]), 1);
}

#[test]
fn command_without_matching_analyses_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &lab(LabVariant::Absorbing, 10, 8));
    assert_eq!(cli(&["--config", &cfg, "backtest"]), 1);
}

#[test]
fn missing_files_exit_three() {
    assert_eq!(cli(&["--config", "/nonexistent/config.json", "simulate"]), 3);
    assert_eq!(cli(&["report", "/nonexistent/report.json"]), 3);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("report.json");
    std::fs::write(&bad, "{\"artifact\": 1}").unwrap();
    assert_eq!(cli(&["report", bad.to_str().unwrap()]), 3);
}

#[test]
fn stored_consistency_failure_rerenders_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut report = run(&lab(LabVariant::Absorbing, 64, 16), Command::Diagnose, Some(1)).unwrap();
    report.consistency_failures = vec!["verdict coherence of R and R+: injected".into()];
    let path = dir.path().join("report.json");
    std::fs::write(&path, report.to_json()).unwrap();
    assert_eq!(cli(&["report", path.to_str().unwrap(), "--format", "csv"]), 2);
}

#[test]
fn report_round_trips_through_json() {
    let report = run(&honest(300, 128), Command::Simulate, Some(1)).unwrap();
    let back = parse_report(&report.to_json()).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.payload(), report.payload());
}

#[test]
fn payload_is_identical_across_thread_counts() {
    let configs = [
        honest(400, 128),
        lab(LabVariant::Absorbing, 400, 64),
        lab(LabVariant::Stopped { a: 0.5 }, 400, 64),
    ];
    for c in &configs {
        let one = run(c, Command::Simulate, Some(1)).unwrap().payload();
        for t in [2, 3] {
            assert_eq!(run(c, Command::Simulate, Some(t)).unwrap().payload(), one);
        }
    }
}

#[test]
fn overrides_replace_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &lab(LabVariant::Stopped { a: 0.5 }, 10_000, 4096));
    let out = dir.path().join("o");
    let code = cli(&[
        "--config",
        &cfg,
        "--seed",
        "5",
        "--paths",
        "40",
        "--steps",
        "8",
        "--threads",
        "1",
        "--format",
        "csv",
        "--out",
        out.to_str().unwrap(),
        "diagnose",
    ]);
    assert_eq!(code, 0);
    assert!(out.join("results.csv").exists());
    assert!(!out.join("report.json").exists());
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.contains("n_paths,40"), "{csv}");
    assert!(csv.contains("n_steps,8"), "{csv}");
}

fn scenario_block() -> impl Strategy<Value = ScenarioBlock> {
    let ht = (0.05f64..2.0, 0.1f64..4.0, 0u32..4, 1e-4f64..0.5, any::<bool>()).prop_map(
        |(sigma, horizon, k, trunc_eps, resolve_tail)| ScenarioBlock {
            honest_time: Some(HonestTimeScenario {
                sigma,
                horizon,
                sim_horizon: horizon * f64::from(1u32 << k),
                trunc_eps,
                floor_eps: 1e-12,
                resolve_tail,
            }),
            ..Default::default()
        },
    );
    let dl = (prop_oneof![
        Just(LabVariant::Absorbing),
        (0.01f64..0.99).prop_map(|a| LabVariant::Stopped { a }),
        Just(LabVariant::Degenerate),
    ], 0.1f64..4.0, 1.0f64..50.0, 0u32..20)
        .prop_map(|(variant, horizon, x0, refine_depth)| ScenarioBlock {
            density_lab: Some(DensityLabScenario {
                variant,
                horizon,
                x0,
                refine_depth,
            }),
            ..Default::default()
        });
    let fz = (0.01f64..1.0, 0.01f64..1.0, 0.1f64..4.0, any::<bool>()).prop_map(
        |(sigma_u, sigma_z, horizon, switch)| ScenarioBlock {
            factorization: Some(FactorizationScenario {
                mode: if switch {
                    FactorizationMode::RegimeSwitch {
                        sigma: sigma_u,
                        schedules: standard_schedules(horizon),
                    }
                } else {
                    FactorizationMode::IndependentDrivers { sigma_u, sigma_z }
                },
                horizon,
            }),
            ..Default::default()
        },
    );
    prop_oneof![ht, dl, fz]
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 128,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn config_round_trips(
        scenario in scenario_block(),
        n_paths in 2usize..1_000_000,
        n_steps in (1usize..1_000).prop_map(|k| 8 * k),
        seed in any::<u64>(),
        antithetic in any::<bool>(),
        chunk in proptest::option::of(2usize..4096),
        threads in proptest::option::of(1usize..64),
        dump_paths in 0usize..100,
        csv in any::<bool>(),
    ) {
        let config = RunConfig {
            scenario,
            engine: EngineBlock { n_paths, n_steps, seed, antithetic, chunk, threads },
            analysis: AnalysisBlock::default(),
            output: OutputBlock {
                directory: "results/run".into(),
                formats: if csv { vec![Format::Json, Format::Csv] } else { vec![Format::Json] },
                dump_paths,
            },
        };
        let back = parse_config(&config.to_json()).unwrap();
        prop_assert_eq!(back, config);
    }

    #[test]
    fn arbitrary_text_never_panics_the_parsers(text in ".{0,200}") {
        let _ = parse_config(&text);
        let _ = parse_report(&text);
    }
}
