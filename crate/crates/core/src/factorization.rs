//! Products of orthogonal strictly positive exponential martingales.
//!
//! Two checks: independent drivers `U = E(σ_U W¹)`, `Z = E(σ_Z W²)` whose
//! product is square integrable, and a regime switch that splits
//! `L = σW` into `∫H dL` and `∫(1-H) dL` with a deterministic `H ∈ {0,1}`.
//! In both cases each factor must be a true martingale.

use serde::{Deserialize, Serialize};

use crate::calculus::{ito_integral, quadratic_variation, stochastic_exponential};
use crate::engine::{default_chunk, par_map_chunks, sample_brownian_paths, ProcessTrack, Stream, TimeGrid};
use crate::error::{LabError, Result};
use crate::stats::Estimate;

/// Tolerance of the factor means, in standard errors.
pub const MEAN_TOLERANCE_SE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FactorizationMode {
    IndependentDrivers {
        sigma_u: f64,
        sigma_z: f64,
    },
    RegimeSwitch {
        sigma: f64,
        /// Each entry is one switch schedule; `H` starts at 1 and toggles at every time.
        schedules: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizationScenario {
    pub mode: FactorizationMode,
    pub horizon: f64,
}

impl Default for FactorizationScenario {
    fn default() -> Self {
        FactorizationScenario {
            mode: FactorizationMode::IndependentDrivers {
                sigma_u: 0.2,
                sigma_z: 0.2,
            },
            horizon: 1.0,
        }
    }
}

/// Switch times for `k` switches on `[0, T]`: `T/2` for one switch, an
/// irregular increasing layout otherwise.
pub fn switch_schedule(k: usize, horizon: f64) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![horizon / 2.0],
        _ => (1..=k)
            .map(|j| horizon * (j as f64 / (k + 1) as f64).powf(1.25))
            .collect(),
    }
}

/// The standard schedules with `K ∈ {0, 1, 2, 5}`.
pub fn standard_schedules(horizon: f64) -> Vec<Vec<f64>> {
    [0, 1, 2, 5]
        .iter()
        .map(|&k| switch_schedule(k, horizon))
        .collect()
}

impl FactorizationScenario {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            errs.push(format!("factorization.horizon must be > 0, got {}", self.horizon));
        }
        let vol = |name: &str, v: f64, errs: &mut Vec<String>| {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("factorization.{name} must be >= 0, got {v}"));
            }
        };
        match &self.mode {
            FactorizationMode::IndependentDrivers { sigma_u, sigma_z } => {
                vol("sigma_u", *sigma_u, &mut errs);
                vol("sigma_z", *sigma_z, &mut errs);
            }
            FactorizationMode::RegimeSwitch { sigma, schedules } => {
                vol("sigma", *sigma, &mut errs);
                if schedules.is_empty() {
                    errs.push("factorization.schedules must not be empty".into());
                }
                for (k, s) in schedules.iter().enumerate() {
                    if s.windows(2).any(|w| !(w[0] < w[1])) {
                        errs.push(format!(
                            "factorization.schedules[{k}] must be strictly increasing"
                        ));
                    }
                    if s.iter().any(|&t| !(t > 0.0 && t < self.horizon)) {
                        errs.push(format!(
                            "factorization.schedules[{k}] times must lie in (0, horizon)"
                        ));
                    }
                }
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(errs.join("; ")))
        }
    }

    fn check_grid(&self, grid: &TimeGrid, n_paths: usize) -> Result<()> {
        self.validate()?;
        if (grid.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(LabError::config(format!(
                "grid horizon {} differs from the scenario horizon {}",
                grid.horizon(),
                self.horizon
            )));
        }
        if n_paths < 2 {
            return Err(LabError::config("n_paths must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalProductReport {
    pub sigma_u: f64,
    pub sigma_z: f64,
    pub horizon: f64,
    pub mean_u: Estimate,
    pub mean_z: Estimate,
    pub mean_product: Estimate,
    pub second_moment_product: Estimate,
    /// `e^{(σ_U² + σ_Z²)T}`.
    pub second_moment_oracle: f64,
    /// Realised covariation `[σ_U W¹, σ_Z W²]_T`.
    pub cross_variation: Estimate,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
struct ProductSummary {
    u: f64,
    z: f64,
    cross: f64,
}

/// Means of `U_T`, `Z_T` and `U_T Z_T` for independent drivers.
pub fn orthogonal_product_check(
    scenario: &FactorizationScenario,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<OrthogonalProductReport> {
    scenario.check_grid(grid, n_paths)?;
    let FactorizationMode::IndependentDrivers { sigma_u, sigma_z } = scenario.mode else {
        return Err(LabError::config(
            "orthogonal_product_check needs mode independent_drivers",
        ));
    };
    let last = grid.n_steps();
    let rows = par_map_chunks(n_paths, default_chunk(grid.n_nodes()), |r| {
        let w1 = sample_brownian_paths(grid, r.clone(), seed, antithetic, Stream::Brownian, "W1")?;
        let w2 = sample_brownian_paths(grid, r, seed, antithetic, Stream::SecondDriver, "W2")?;
        let a = w1.get("W1")?.map("A", |v| sigma_u * v);
        let b = w2.get("W2")?.map("B", |v| sigma_z * v);
        let u = stochastic_exponential(&a)?;
        let z = stochastic_exponential(&b)?;
        let cross = ito_integral(&a, &b)?;
        let cross = cross_variation(&a, &b, &cross)?;
        Ok((0..a.n_paths())
            .map(|p| ProductSummary {
                u: u.get(p, last),
                z: z.get(p, last),
                cross: cross.get(p, last),
            })
            .collect())
    })?;
    let col = |f: fn(&ProductSummary) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    let product: Vec<f64> = rows.iter().map(|s| s.u * s.z).collect();
    let squares: Vec<f64> = product.iter().map(|v| v * v).collect();
    let mean_u = Estimate::from_samples(&col(|s| s.u));
    let mean_z = Estimate::from_samples(&col(|s| s.z));
    let mean_product = Estimate::from_samples(&product);
    let passed = [mean_u, mean_z, mean_product]
        .iter()
        .all(|e| e.within(1.0, MEAN_TOLERANCE_SE));
    Ok(OrthogonalProductReport {
        sigma_u,
        sigma_z,
        horizon: scenario.horizon,
        mean_u,
        mean_z,
        mean_product,
        second_moment_product: Estimate::from_samples(&squares),
        second_moment_oracle: ((sigma_u * sigma_u + sigma_z * sigma_z) * scenario.horizon).exp(),
        cross_variation: Estimate::from_samples(&col(|s| s.cross)),
        passed,
    })
}

/// `[A, B] = AB - ∫A dB - ∫B dA`, given `∫A dB`.
fn cross_variation(a: &ProcessTrack, b: &ProcessTrack, a_db: &ProcessTrack) -> Result<ProcessTrack> {
    let b_da = ito_integral(b, a)?;
    let ab = a.zip_with(b, "AB", |x, y| x * y)?;
    let partial = ab.zip_with(a_db, "AB-intAdB", |x, y| x - y)?;
    partial.zip_with(&b_da, "[A,B]", |x, y| x - y)
}

/// `H` on each step (left endpoint): 1 before the first switch, toggling at each switch.
pub fn regime_indicator(grid: &TimeGrid, switches: &[f64]) -> Vec<f64> {
    (0..grid.n_nodes())
        .map(|i| {
            let t = grid.node(i);
            let k = switches.iter().filter(|&&s| s <= t).count();
            if k % 2 == 0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeEntry {
    pub k: usize,
    pub switch_times: Vec<f64>,
    pub mean_u: Estimate,
    pub mean_z: Estimate,
    /// `max |U_T Z_T / E(L)_T - 1|` over paths.
    pub max_factorization_error: f64,
    /// Realised covariation `[∫H dL, ∫(1-H) dL]_T`.
    pub cross_variation: Estimate,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSwitchReport {
    pub sigma: f64,
    pub horizon: f64,
    pub entries: Vec<RegimeEntry>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
struct RegimeSummary {
    u: f64,
    z: f64,
    error: f64,
    cross: f64,
}

/// Means of `U = E(∫H dL)` and `Z = E(∫(1-H) dL)` for every schedule, on common paths.
pub fn regime_switch_check(
    scenario: &FactorizationScenario,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<RegimeSwitchReport> {
    scenario.check_grid(grid, n_paths)?;
    let FactorizationMode::RegimeSwitch { sigma, schedules } = &scenario.mode else {
        return Err(LabError::config("regime_switch_check needs mode regime_switch"));
    };
    let sigma = *sigma;
    let last = grid.n_steps();
    let indicators: Vec<Vec<f64>> = schedules.iter().map(|s| regime_indicator(grid, s)).collect();
    let rows = par_map_chunks(n_paths, default_chunk(grid.n_nodes()), |r| {
        let ens = sample_brownian_paths(grid, r, seed, antithetic, Stream::Brownian, "W")?;
        let l = ens.get("W")?.map("L", |v| sigma * v);
        let whole = stochastic_exponential(&l)?;
        let n = l.n_paths();
        let mut out = vec![Vec::with_capacity(indicators.len()); n];
        for (p, row) in out.iter_mut().enumerate() {
            let lr = l.row(p);
            for h in &indicators {
                let (mut log_u, mut log_z, mut cross) = (0.0, 0.0, 0.0);
                for i in 0..last {
                    let dl = lr[i + 1] - lr[i];
                    let (du, dz) = (h[i] * dl, (1.0 - h[i]) * dl);
                    log_u += du - 0.5 * du * du;
                    log_z += dz - 0.5 * dz * dz;
                    cross += du * dz;
                }
                let (ut, zt) = (log_u.exp(), log_z.exp());
                row.push(RegimeSummary {
                    u: ut,
                    z: zt,
                    error: (ut * zt / whole.get(p, last) - 1.0).abs(),
                    cross,
                });
            }
        }
        Ok(out)
    })?;
    let entries: Vec<RegimeEntry> = schedules
        .iter()
        .enumerate()
        .map(|(k, times)| {
            let u: Vec<f64> = rows.iter().map(|r| r[k].u).collect();
            let z: Vec<f64> = rows.iter().map(|r| r[k].z).collect();
            let cross: Vec<f64> = rows.iter().map(|r| r[k].cross).collect();
            let mean_u = Estimate::from_samples(&u);
            let mean_z = Estimate::from_samples(&z);
            RegimeEntry {
                k: times.len(),
                switch_times: times.clone(),
                mean_u,
                mean_z,
                max_factorization_error: rows.iter().map(|r| r[k].error).fold(0.0, f64::max),
                cross_variation: Estimate::from_samples(&cross),
                passed: mean_u.within(1.0, MEAN_TOLERANCE_SE)
                    && mean_z.within(1.0, MEAN_TOLERANCE_SE),
            }
        })
        .collect();
    let passed = entries.iter().all(|e| e.passed);
    Ok(RegimeSwitchReport {
        sigma,
        horizon: scenario.horizon,
        entries,
        passed,
    })
}

/// Realised quadratic variation of `∫H dL` at the horizon, per path.
pub fn factor_brackets(grid: &TimeGrid, l: &ProcessTrack, switches: &[f64]) -> Result<Vec<f64>> {
    let h = regime_indicator(grid, switches);
    let hu = ProcessTrack::from_fn("H", l.n_paths(), grid.n_nodes(), |_, i| h[i]);
    Ok(quadratic_variation(&ito_integral(&hu, l)?).terminal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::build_grid;

    fn grid() -> TimeGrid {
        build_grid(1.0, 64).unwrap()
    }

    #[test]
    fn schedules_are_increasing_and_inside() {
        for k in 0..8 {
            let s = switch_schedule(k, 2.0);
            assert_eq!(s.len(), k);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&t| t > 0.0 && t < 2.0));
        }
        assert_eq!(switch_schedule(1, 1.0), vec![0.5]);
    }

    #[test]
    fn indicator_toggles() {
        let g = build_grid(1.0, 4).unwrap();
        assert_eq!(regime_indicator(&g, &[0.5]), vec![1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(regime_indicator(&g, &[]), vec![1.0; 5]);
        assert_eq!(regime_indicator(&g, &[0.3, 0.6]), vec![1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn unsorted_schedule_is_rejected() {
        let scn = FactorizationScenario {
            mode: FactorizationMode::RegimeSwitch {
                sigma: 0.2,
                schedules: vec![vec![0.6, 0.3]],
            },
            horizon: 1.0,
        };
        assert!(scn.validate().is_err());
    }

    #[test]
    fn zero_volatility_factor_is_one() {
        let scn = FactorizationScenario {
            mode: FactorizationMode::IndependentDrivers {
                sigma_u: 0.0,
                sigma_z: 0.2,
            },
            horizon: 1.0,
        };
        let r = orthogonal_product_check(&scn, &grid(), 200, 1, false).unwrap();
        assert_eq!(r.mean_u.mean, 1.0);
        assert_eq!(r.mean_u.std_error, 0.0);
        assert_eq!(r.mean_product, r.mean_z);
    }

    #[test]
    fn no_switch_gives_the_whole_exponential() {
        let scn = FactorizationScenario {
            mode: FactorizationMode::RegimeSwitch {
                sigma: 0.3,
                schedules: vec![vec![]],
            },
            horizon: 1.0,
        };
        let r = regime_switch_check(&scn, &grid(), 100, 2, false).unwrap();
        let e = &r.entries[0];
        assert_eq!(e.mean_z.mean, 1.0);
        assert_eq!(e.mean_z.std_error, 0.0);
        assert!(e.max_factorization_error < 1e-12);
    }

    #[test]
    fn factors_multiply_to_the_exponential() {
        let scn = FactorizationScenario {
            mode: FactorizationMode::RegimeSwitch {
                sigma: 0.3,
                schedules: standard_schedules(1.0),
            },
            horizon: 1.0,
        };
        let r = regime_switch_check(&scn, &grid(), 100, 3, false).unwrap();
        for e in &r.entries {
            assert!(e.max_factorization_error < 1e-12, "{e:?}");
            assert!(e.cross_variation.mean.abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let scn = FactorizationScenario::default();
        assert!(regime_switch_check(&scn, &grid(), 10, 1, false).is_err());
    }

    #[test]
    fn brackets_split_the_clock() {
        let g = build_grid(1.0, 1024).unwrap();
        let ens = crate::engine::sample_brownian(&g, 400, 5, false).unwrap();
        let l = ens.get("W").unwrap().clone();
        let q = factor_brackets(&g, &l, &[0.5]).unwrap();
        let m = crate::stats::mean(&q);
        assert!((m - 0.5).abs() < 0.01, "{m}");
    }

    #[test]
    fn config_round_trip() {
        let scn = FactorizationScenario {
            mode: FactorizationMode::RegimeSwitch {
                sigma: 0.2,
                schedules: standard_schedules(1.0),
            },
            horizon: 1.0,
        };
        let s = serde_json::to_string(&scn).unwrap();
        assert!(s.contains("\"kind\":\"regime_switch\""));
        let back: FactorizationScenario = serde_json::from_str(&s).unwrap();
        assert_eq!(back, scn);
    }
}
