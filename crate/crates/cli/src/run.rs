//! Executes a validated config and assembles the report.

use std::time::Instant;

use insiderlab::density_lab::{LabPlan, LabStudy, NullFunctional};
use insiderlab::engine::{default_chunk, TimeGrid};
use insiderlab::factorization::{orthogonal_product_check, regime_switch_check};
use insiderlab::honest_time::{entropy_study, HonestTimeScenario, HonestTimeStudy, R_STATUS};
use serde::{Deserialize, Serialize};

use crate::config::{Analysis, RunConfig, Scenario};
use crate::error::{CliError, CliResult};
use crate::report::{
    DensityLabResults, DensitySummary, DriftEnergyResult, EntropyResult, FactorizationResults,
    HonestTimeResults, Metrics, Results, RunReport, SupExceedance, SupermartingaleAudit, ARTIFACT,
    VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Every configured analysis.
    Simulate,
    /// Density defects, supermartingale audits and stopping-time statistics.
    Diagnose,
    /// Relative-entropy objective of the perturbation family.
    Entropy,
    /// Short and long-only strategy audits.
    Backtest,
    /// Orthogonal-product and regime-switch checks.
    Factorization,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Diagnose => "diagnose",
            Command::Entropy => "entropy",
            Command::Backtest => "backtest",
            Command::Factorization => "factorization",
        }
    }

    fn accepts(&self, a: Analysis) -> bool {
        use Analysis::*;
        match self {
            Command::Simulate => true,
            Command::Diagnose => matches!(
                a,
                QsDensity | Supermartingale | DriftEnergy | IncrementTest | Defects | Tau
                    | NullProjection | Immersion
            ),
            Command::Entropy => a == Entropy,
            Command::Backtest => matches!(a, ShortAudit | LongOnlyAudit),
            Command::Factorization => matches!(a, OrthogonalProduct | RegimeSwitch),
        }
    }

    /// The configured analyses this command runs.
    pub fn select(&self, config: &RunConfig) -> CliResult<Vec<Analysis>> {
        let kind = config.scenario().kind();
        let chosen: Vec<Analysis> = config
            .analyses()
            .into_iter()
            .filter(|a| self.accepts(*a))
            .collect();
        if chosen.is_empty() {
            return Err(CliError::Validation(vec![format!(
                "command '{}' has nothing to run for the {:?} scenario with the configured analyses",
                self.name(),
                kind
            )]));
        }
        Ok(chosen)
    }
}

/// Runs `command` on a pool of `threads` workers (all cores when `None`).
pub fn run(config: &RunConfig, command: Command, threads: Option<usize>) -> CliResult<RunReport> {
    config.validate()?;
    let analyses = command.select(config)?;
    let threads = threads.or(config.engine.threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Validation(vec![format!("thread pool: {e}")]))?;
    let started = Instant::now();
    let (results, failures) = pool.install(|| execute(config, &analyses))?;
    let elapsed = started.elapsed().as_secs_f64();
    Ok(RunReport {
        artifact: ARTIFACT.into(),
        version: VERSION.into(),
        command: command.name().into(),
        seed: config.engine.seed,
        config: config.clone(),
        results,
        consistency_failures: failures,
        metrics: Metrics {
            wall_clock_s: elapsed,
            paths_per_s: config.engine.n_paths as f64 / elapsed.max(1e-9),
            threads: pool.current_num_threads(),
        },
    })
}

fn execute(config: &RunConfig, analyses: &[Analysis]) -> CliResult<(Results, Vec<String>)> {
    let grid = config.grid()?;
    match config.scenario() {
        Scenario::HonestTime(h) => honest_time(config, h, &grid, analyses),
        Scenario::DensityLab(_) => density_lab(config, &grid, analyses),
        Scenario::Factorization(_) => factorization(config, &grid, analyses),
    }
}

fn chunk(config: &RunConfig, grid: &TimeGrid) -> usize {
    config
        .engine
        .chunk
        .unwrap_or_else(|| default_chunk(grid.n_nodes()))
}

fn honest_time(
    config: &RunConfig,
    scenario: &HonestTimeScenario,
    grid: &TimeGrid,
    analyses: &[Analysis],
) -> CliResult<(Results, Vec<String>)> {
    let e = &config.engine;
    let has = |a: Analysis| analyses.contains(&a);
    let plan = config.honest_plan(grid)?;
    let c_grid = plan.c_grid.clone();
    let needs_study = analyses.iter().any(|&a| a != Analysis::Entropy);
    let study = if needs_study {
        Some(HonestTimeStudy::run(
            scenario,
            grid,
            e.n_paths,
            e.seed,
            e.antithetic,
            plan,
            chunk(config, grid),
        )?)
    } else {
        None
    };
    let mut out = HonestTimeResults {
        n_paths: e.n_paths,
        n_steps: e.n_steps,
        truncation: None,
        qs_density: None,
        supermartingale: None,
        short_audit: None,
        long_only_audit: None,
        drift_energy: None,
        entropy: None,
        floor_sensitivity: None,
        increment_test: None,
        sup_exceedance: None,
    };
    if let Some(s) = &study {
        out.truncation = Some(s.truncation());
        if has(Analysis::QsDensity) {
            out.qs_density = Some(s.qs_defect()?);
        }
        if has(Analysis::Supermartingale) {
            let x_under_qs = s.x_monotonicity(true)?;
            let stopped_x_under_qs = s.stopped_x_monotonicity(true)?;
            let stopped_x_under_p = s.stopped_x_monotonicity(false)?;
            out.supermartingale = Some(SupermartingaleAudit {
                passed: x_under_qs.passed && stopped_x_under_qs.passed,
                x_under_qs,
                stopped_x_under_qs,
                stopped_x_under_p,
            });
        }
        if has(Analysis::ShortAudit) {
            out.short_audit = Some(s.short_audit()?);
        }
        if has(Analysis::LongOnlyAudit) {
            out.long_only_audit = Some(s.long_only_audit()?);
        }
        if has(Analysis::DriftEnergy) {
            let profile = s.drift_energy()?;
            out.drift_energy = Some(DriftEnergyResult {
                minimal_martingale_density: R_STATUS.into(),
                blow_up: profile.strictly_increasing && profile.slope_significant,
                profile,
            });
        }
        if has(Analysis::FloorSensitivity) {
            out.floor_sensitivity = Some(s.floor_sensitivity());
        }
        if has(Analysis::IncrementTest) {
            out.increment_test = s.increment_test();
        }
        if has(Analysis::SupExceedance) {
            let levels = config
                .analysis
                .sup_levels
                .clone()
                .unwrap_or_else(|| vec![2.0, 4.0]);
            let freq = s.sup_exceedance(&levels);
            out.sup_exceedance = Some(
                levels
                    .iter()
                    .zip(freq)
                    .map(|(&level, frequency)| SupExceedance {
                        level,
                        frequency,
                        oracle: (1.0 / level).min(1.0),
                    })
                    .collect(),
            );
        }
    }
    if has(Analysis::Entropy) {
        let n_paths = config.analysis.entropy_paths.unwrap_or(e.n_paths);
        let n_steps = config.analysis.entropy_steps.unwrap_or(e.n_steps);
        let egrid = TimeGrid::new(scenario.sim_horizon, n_steps)?;
        let points = entropy_study(scenario, &egrid, n_paths, e.seed, e.antithetic, &c_grid)?;
        out.entropy = Some(EntropyResult {
            n_paths,
            n_steps,
            points,
        });
    }
    Ok((Results::HonestTime(out), Vec::new()))
}

fn density_lab(
    config: &RunConfig,
    grid: &TimeGrid,
    analyses: &[Analysis],
) -> CliResult<(Results, Vec<String>)> {
    let Scenario::DensityLab(scenario) = config.scenario() else {
        unreachable!()
    };
    let e = &config.engine;
    let a = &config.analysis;
    let has = |x: Analysis| analyses.contains(&x);
    let plan = LabPlan {
        richardson: has(Analysis::Defects) && a.richardson.unwrap_or(true),
        null_functionals: NullFunctional::all(),
        null_checkpoints: a.null_checkpoints.unwrap_or(4),
        immersion_buckets: if has(Analysis::Immersion) {
            a.immersion_buckets.unwrap_or(4)
        } else {
            0
        },
    };
    let study = LabStudy::run(
        scenario,
        grid,
        e.n_paths,
        e.seed,
        e.antithetic,
        plan,
        chunk(config, grid),
    )?;
    let (min, max) = study.density_range();
    let mut failures = Vec::new();
    let defects = if has(Analysis::Defects) {
        let pair = study.defect_reports()?;
        if let Err(err) = pair.check_coherent() {
            failures.push(format!("verdict coherence of R and R+: {err}"));
        }
        Some(pair)
    } else {
        None
    };
    let out = DensityLabResults {
        n_paths: e.n_paths,
        n_steps: e.n_steps,
        density: DensitySummary {
            mean: study.density_mean(),
            min,
            max,
            positivity_violations: study.positivity_violations(),
            max_factorization_error: study.max_factorization_error(),
        },
        defects,
        tau: has(Analysis::Tau).then(|| study.tau_statistics()),
        null_projection: has(Analysis::NullProjection).then(|| study.null_projection()),
        immersion: if has(Analysis::Immersion) {
            study.immersion_check()
        } else {
            None
        },
    };
    Ok((Results::DensityLab(out), failures))
}

fn factorization(
    config: &RunConfig,
    grid: &TimeGrid,
    analyses: &[Analysis],
) -> CliResult<(Results, Vec<String>)> {
    let Scenario::Factorization(scenario) = config.scenario() else {
        unreachable!()
    };
    let e = &config.engine;
    let mut out = FactorizationResults {
        n_paths: e.n_paths,
        n_steps: e.n_steps,
        orthogonal_product: None,
        regime_switch: None,
    };
    if analyses.contains(&Analysis::OrthogonalProduct) {
        out.orthogonal_product = Some(orthogonal_product_check(
            scenario,
            grid,
            e.n_paths,
            e.seed,
            e.antithetic,
        )?);
    }
    if analyses.contains(&Analysis::RegimeSwitch) {
        out.regime_switch = Some(regime_switch_check(
            scenario,
            grid,
            e.n_paths,
            e.seed,
            e.antithetic,
        )?);
    }
    Ok((Results::Factorization(out), Vec::new()))
}
