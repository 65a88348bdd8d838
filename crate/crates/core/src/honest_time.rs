//! The price `X = E(σW)` seen by an insider who knows the honest time
//! `g = sup{t : X_t = S_∞}`, the last passage of `X` at its overall supremum.
//!
//! In the enlarged filtration `X = 1 + M + ∫α d⟨M⟩` with `M = ∫σX dŴ`,
//! `α = 1/X` on `[0, g]` and `α = -1/(S - X)` after `g`. The density
//! `R⁺ = E(-σŴ_{·∧g∧T})` of the minimal supermartingale measure is `1/X`
//! up to `g` and frozen afterwards, while `∫α² d⟨M⟩` diverges just after `g`.
//!
//! Grid conventions:
//!
//! * `g` is the last node attaining the grid maximum (ties go to the latest node).
//! * Each path also carries its continuous supremum on `[0, T_sim]`, sampled
//!   exactly from the Brownian bridges between nodes. Values read at the
//!   honest time (`R⁺` after `g`, the entropy family, `α` after `g`) use it,
//!   which removes the `O(√Δ)` undershoot of the grid maximum.
//! * The supremum after `T_sim` is `X_{T_sim}/U` with `U` uniform, so whether
//!   `g` lies beyond the simulation is decided exactly when `resolve_tail` is on.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{CellLayout, OrthogonalityReport};
use crate::engine::{fill_increments, par_map_chunks, path_rng, ProcessTrack, Stream, TimeGrid};
use crate::error::{LabError, Result};
use crate::measures::{
    martingale_defect, monotonicity_from_rows, relative_entropy_with_energy, DefectReport,
    EntropyReport, MonotoneReport,
};
use crate::stats::{ols_slope_weights, Estimate, Frequency};
use crate::strategies::{
    default_long_only_set, insider_short_spec, ArbitrageReport, LongOnlyReport, PathContext,
    StrategySpec,
};

/// Status reported for `R = E(-∫α dM)` in this model: `∫α² d⟨M⟩` diverges after `g`.
pub const R_STATUS: &str = "undefined: integrability failure";

/// Bridge intervals whose crossing probability is below `e^-32` are skipped.
const BRIDGE_EXPONENT_CUTOFF: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HonestTimeScenario {
    pub sigma: f64,
    /// Trading horizon `T`.
    pub horizon: f64,
    /// Simulation horizon `T_sim >= T`.
    pub sim_horizon: f64,
    #[serde(default = "default_trunc_eps")]
    pub trunc_eps: f64,
    #[serde(default = "default_floor_eps")]
    pub floor_eps: f64,
    #[serde(default = "default_true")]
    pub resolve_tail: bool,
}

fn default_trunc_eps() -> f64 {
    0.05
}

fn default_floor_eps() -> f64 {
    1e-6
}

fn default_true() -> bool {
    true
}

impl Default for HonestTimeScenario {
    fn default() -> Self {
        HonestTimeScenario {
            sigma: 0.3,
            horizon: 1.0,
            sim_horizon: 1.0,
            trunc_eps: default_trunc_eps(),
            floor_eps: default_floor_eps(),
            resolve_tail: true,
        }
    }
}

impl HonestTimeScenario {
    /// Every violated precondition, not just the first.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            errs.push(format!(
                "honest_time.sigma must be > 0 (zero volatility leaves g degenerate), got {}",
                self.sigma
            ));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            errs.push(format!("honest_time.horizon must be > 0, got {}", self.horizon));
        }
        if !(self.sim_horizon >= self.horizon && self.sim_horizon.is_finite()) {
            errs.push(format!(
                "honest_time.sim_horizon must be >= horizon ({}), got {}",
                self.horizon, self.sim_horizon
            ));
        }
        if !(self.trunc_eps > 0.0 && self.trunc_eps < 1.0) {
            errs.push(format!(
                "trunc_eps must lie in (0,1), got {}",
                self.trunc_eps
            ));
        }
        if !(self.floor_eps > 0.0 && self.floor_eps < 1.0) {
            errs.push(format!(
                "honest_time.floor_eps must lie in (0,1), got {}",
                self.floor_eps
            ));
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

    /// Checks the scenario against a grid and returns the node of `T`.
    pub fn horizon_index(&self, grid: &TimeGrid) -> Result<usize> {
        self.validate()?;
        if (grid.horizon() - self.sim_horizon).abs() > 1e-12 * self.sim_horizon {
            return Err(LabError::config(format!(
                "grid horizon {} differs from sim_horizon {}",
                grid.horizon(),
                self.sim_horizon
            )));
        }
        grid.index_at(self.horizon)
    }
}

/// Simulated honest-time paths for a block of global path indices.
#[derive(Debug, Clone)]
pub struct HonestTimePaths {
    pub scenario: HonestTimeScenario,
    pub grid: TimeGrid,
    pub paths: Range<usize>,
    /// Node of the trading horizon `T`.
    pub horizon_index: usize,
    pub x: ProcessTrack,
    /// Running maximum of `X` over the grid nodes.
    pub s: ProcessTrack,
    pub w: ProcessTrack,
    /// Forward increments of `W` (last column 0).
    pub dw: ProcessTrack,
    pub w_hat: ProcessTrack,
    pub alpha: ProcessTrack,
    /// Grid node of `g`; `None` when `g` lies beyond `T_sim`.
    pub g: Vec<Option<usize>>,
    /// Continuous supremum of `X` over `[0, T_sim]`.
    pub sup: Vec<f64>,
    /// Supremum over `[0, ∞)`: `sup` or the resolved tail supremum.
    pub overall_sup: Vec<f64>,
    /// `X_{T_sim}/sup`: probability that the supremum is attained after `T_sim`.
    pub tail_bound: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct RowOutcome {
    g: Option<usize>,
    sup: f64,
    overall_sup: f64,
    tail_bound: f64,
}

struct RowBuffers<'a> {
    dw: &'a mut [f64],
    w: &'a mut [f64],
    x: &'a mut [f64],
    s: &'a mut [f64],
    alpha: &'a mut [f64],
    w_hat: &'a mut [f64],
}

/// Exact maximum of `log X` over `[0, T_sim]` given the node values, sampled
/// interval by interval from the Brownian-bridge maximum law.
fn continuous_log_max(log_x: &[f64], grid_max: f64, var_step: f64, rng: &mut impl Rng) -> f64 {
    let mut best = grid_max;
    for pair in log_x.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if 2.0 * (grid_max - a) * (grid_max - b) / var_step >= BRIDGE_EXPONENT_CUTOFF {
            continue;
        }
        let u = 1.0 - rng.random::<f64>();
        let m = 0.5 * (a + b + ((b - a).powi(2) - 2.0 * var_step * u.ln()).sqrt());
        best = best.max(m);
    }
    best
}

/// Log-price path, grid argmax, continuous supremum and honest-time node of one path.
fn log_path(
    scn: &HonestTimeScenario,
    grid: &TimeGrid,
    seed: u64,
    path: usize,
    antithetic: bool,
    dw: &mut [f64],
    log_x: &mut [f64],
) -> RowOutcome {
    let n = grid.n_steps();
    let sigma = scn.sigma;
    fill_increments(&mut dw[..n], seed, path, Stream::Brownian, grid.dt(), antithetic);
    let mut acc = 0.0;
    let mut lmax = f64::NEG_INFINITY;
    let mut argmax = 0;
    for i in 0..=n {
        if i > 0 {
            acc += dw[i - 1];
        }
        log_x[i] = sigma * acc - 0.5 * sigma * sigma * grid.node(i);
        if log_x[i] >= lmax {
            lmax = log_x[i];
            argmax = i;
        }
    }
    let mut bridge = path_rng(seed, path, Stream::Bridge);
    let sup = continuous_log_max(log_x, lmax, sigma * sigma * grid.dt(), &mut bridge).exp();
    let x_end = log_x[n].exp();
    let tail_bound = x_end / sup;
    let (g, overall_sup) = if scn.resolve_tail {
        let u: f64 = path_rng(seed, path, Stream::Auxiliary).random();
        if u < tail_bound {
            (None, x_end / u)
        } else {
            (Some(argmax), sup)
        }
    } else {
        (Some(argmax), sup)
    };
    RowOutcome {
        g,
        sup,
        overall_sup,
        tail_bound,
    }
}

fn simulate_row(
    scn: &HonestTimeScenario,
    grid: &TimeGrid,
    seed: u64,
    path: usize,
    antithetic: bool,
    buf: RowBuffers<'_>,
) -> RowOutcome {
    let n = grid.n_steps();
    let dt = grid.dt();
    let sigma = scn.sigma;
    let mut log_x = vec![0.0; n + 1];
    let out = log_path(scn, grid, seed, path, antithetic, buf.dw, &mut log_x);
    buf.dw[n] = 0.0;
    let mut acc = 0.0;
    let mut smax = f64::NEG_INFINITY;
    for i in 0..=n {
        if i > 0 {
            acc += buf.dw[i - 1];
        }
        buf.w[i] = acc;
        buf.x[i] = log_x[i].exp();
        smax = smax.max(buf.x[i]);
        buf.s[i] = smax;
    }
    let floor = scn.floor_eps * out.sup;
    for i in 0..=n {
        buf.alpha[i] = match out.g {
            Some(g) if i > g => -1.0 / (out.sup - buf.x[i]).max(floor),
            _ => 1.0 / buf.x[i],
        };
    }
    buf.w_hat[0] = 0.0;
    for i in 0..n {
        buf.w_hat[i + 1] = buf.w_hat[i] + buf.dw[i] - sigma * buf.alpha[i] * buf.x[i] * dt;
    }
    out
}

/// `(τ, log X_τ)` with `τ = g ∧ T` for global paths `paths`, without
/// materialising tracks. Agrees exactly with [`HonestTimePaths::stop_points`].
pub fn simulate_stop_points(
    scenario: &HonestTimeScenario,
    grid: &TimeGrid,
    paths: Range<usize>,
    seed: u64,
    antithetic: bool,
) -> Result<Vec<(f64, f64)>> {
    let t_idx = scenario.horizon_index(grid)?;
    let nn = grid.n_nodes();
    Ok(paths
        .into_par_iter()
        .map_init(
            || (vec![0.0; nn], vec![0.0; nn]),
            |(dw, log_x), p| {
                let o = log_path(scenario, grid, seed, p, antithetic, dw, log_x);
                stop_point(o.g, o.sup, log_x[t_idx].exp(), t_idx, grid)
            },
        )
        .collect())
}

/// Entropy objective of the family `Q^(c)` from a track-free run of `n_paths` paths.
pub fn entropy_study(
    scenario: &HonestTimeScenario,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
    c_grid: &[f64],
) -> Result<Vec<EntropyPoint>> {
    if n_paths == 0 {
        return Err(LabError::config("n_paths must be at least 1"));
    }
    let stops = simulate_stop_points(scenario, grid, 0..n_paths, seed, antithetic)?;
    entropy_from_stop_points(scenario.sigma, &stops, c_grid)
}

/// Simulates global paths `paths` without the truncation guard.
pub fn simulate_honest_time_range(
    scenario: &HonestTimeScenario,
    grid: &TimeGrid,
    paths: Range<usize>,
    seed: u64,
    antithetic: bool,
) -> Result<HonestTimePaths> {
    let horizon_index = scenario.horizon_index(grid)?;
    let n_paths = paths.len();
    if n_paths == 0 {
        return Err(LabError::config("n_paths must be at least 1"));
    }
    let nn = grid.n_nodes();
    let mut x = ProcessTrack::zeros("X", n_paths, nn);
    let mut s = ProcessTrack::zeros("S", n_paths, nn);
    let mut w = ProcessTrack::zeros("W", n_paths, nn);
    let mut dw = ProcessTrack::zeros("dW", n_paths, nn);
    let mut w_hat = ProcessTrack::zeros("W_hat", n_paths, nn);
    let mut alpha = ProcessTrack::zeros("alpha", n_paths, nn);
    let offset = paths.start;
    let outcomes: Vec<RowOutcome> = dw
        .par_rows_mut()
        .zip(w.par_rows_mut())
        .zip(x.par_rows_mut())
        .zip(s.par_rows_mut())
        .zip(alpha.par_rows_mut())
        .zip(w_hat.par_rows_mut())
        .enumerate()
        .map(|(p, (((((dw, w), x), s), alpha), w_hat))| {
            simulate_row(
                scenario,
                grid,
                seed,
                offset + p,
                antithetic,
                RowBuffers {
                    dw,
                    w,
                    x,
                    s,
                    alpha,
                    w_hat,
                },
            )
        })
        .collect();
    for (p, o) in outcomes.iter().enumerate() {
        if !o.sup.is_finite() || !x.get(p, nn - 1).is_finite() {
            return Err(LabError::NonFinite {
                what: "X".into(),
                path: offset + p,
                node: nn - 1,
            });
        }
    }
    Ok(HonestTimePaths {
        scenario: *scenario,
        grid: *grid,
        paths,
        horizon_index,
        x,
        s,
        w,
        dw,
        w_hat,
        alpha,
        g: outcomes.iter().map(|o| o.g).collect(),
        sup: outcomes.iter().map(|o| o.sup).collect(),
        overall_sup: outcomes.iter().map(|o| o.overall_sup).collect(),
        tail_bound: outcomes.iter().map(|o| o.tail_bound).collect(),
    })
}

fn check_truncation(scenario: &HonestTimeScenario, tail_bound: &[f64]) -> Result<()> {
    if scenario.resolve_tail {
        return Ok(());
    }
    let mean = Estimate::from_samples(tail_bound).mean;
    if mean > scenario.trunc_eps {
        return Err(LabError::TruncationTooLoose {
            mean,
            trunc_eps: scenario.trunc_eps,
        });
    }
    Ok(())
}

/// Simulates paths `0..n_paths`. Without tail resolution the run is rejected
/// when the mean tail bound exceeds `trunc_eps`.
pub fn simulate_honest_time(
    scenario: &HonestTimeScenario,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<HonestTimePaths> {
    let paths = simulate_honest_time_range(scenario, grid, 0..n_paths, seed, antithetic)?;
    check_truncation(scenario, &paths.tail_bound)?;
    Ok(paths)
}

/// `g ∧ T` as a node index.
fn stop_node(g: Option<usize>, t_idx: usize) -> usize {
    g.map_or(t_idx, |g| g.min(t_idx))
}

/// `(τ, log X_τ)` with `τ = g ∧ T`; at `g < T` the level is the continuous supremum.
fn stop_point(g: Option<usize>, sup: f64, x_t: f64, t_idx: usize, grid: &TimeGrid) -> (f64, f64) {
    match g {
        Some(g) if g < t_idx => (grid.node(g), sup.ln()),
        _ => (grid.node(t_idx), x_t.ln()),
    }
}

impl HonestTimePaths {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    /// `(τ, log X_τ)` per path with `τ = g ∧ T`.
    pub fn stop_points(&self) -> Vec<(f64, f64)> {
        let t = self.horizon_index;
        (0..self.n_paths())
            .map(|p| stop_point(self.g[p], self.sup[p], self.x.get(p, t), t, &self.grid))
            .collect()
    }

    /// Per-path inputs of the strategy rules, trading until `T`.
    pub fn context(&self, p: usize) -> PathContext<'_> {
        PathContext {
            x: self.x.row(p),
            running_max: self.s.row(p),
            g: self.g[p],
            end: self.horizon_index,
        }
    }

    /// Drift integrand check: `σ Σ X dŴ + Σ α σ² X² Δ` against `σ Σ X dW`, per path maximum.
    pub fn drift_identity_error(&self) -> f64 {
        let (sigma, dt) = (self.scenario.sigma, self.grid.dt());
        (0..self.n_paths())
            .map(|p| {
                let (x, a, wh, dw) = (
                    self.x.row(p),
                    self.alpha.row(p),
                    self.w_hat.row(p),
                    self.dw.row(p),
                );
                let mut lhs = 0.0;
                let mut rhs = 0.0;
                let mut worst: f64 = 0.0;
                for i in 0..self.horizon_index {
                    lhs += sigma * x[i] * (wh[i + 1] - wh[i]) + a[i] * sigma * sigma * x[i] * x[i] * dt;
                    rhs += sigma * x[i] * dw[i];
                    worst = worst.max((lhs - rhs).abs());
                }
                worst
            })
            .fold(0.0, f64::max)
    }
}

/// Density track of the minimal supermartingale measure,
/// `R⁺_t = exp(-σŴ_{t∧g∧T} - σ²(t∧g∧T)/2)`. After `g < T` it is frozen at
/// `1/S_∞`, the continuous value at `g`.
pub fn qs_density(paths: &HonestTimePaths) -> ProcessTrack {
    let sigma = paths.scenario.sigma;
    let t_idx = paths.horizon_index;
    let grid = paths.grid;
    let mut r = ProcessTrack::zeros("R+", paths.n_paths(), grid.n_nodes());
    for p in 0..paths.n_paths() {
        let stop = stop_node(paths.g[p], t_idx);
        let wh = paths.w_hat.row(p);
        let row = r.row_mut(p);
        for i in 0..=stop {
            let t = grid.node(i);
            row[i] = (-sigma * wh[i] - 0.5 * sigma * sigma * t).exp();
        }
        let frozen = match paths.g[p] {
            Some(g) if g < t_idx => 1.0 / paths.sup[p],
            _ => row[stop],
        };
        row[stop + 1..].fill(frozen);
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyPoint {
    pub delta: f64,
    pub offset_steps: usize,
    /// `E[1{g+δ<T} ∫_{g+δ}^T α² d⟨M⟩]`, nondecreasing pathwise as `δ` falls.
    pub mean: Estimate,
    /// Mean over paths with `g + δ < T`; `None` when there are none.
    pub conditional_mean: Option<Estimate>,
    pub n_conditioning: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEnergyReport {
    pub points: Vec<EnergyPoint>,
    /// Regression slope of the energy on `ln(1/δ)`, averaged from per-path slopes.
    pub slope: Estimate,
    pub strictly_increasing: bool,
    pub slope_significant: bool,
    /// `E[∫_0^{g∧T} α² d⟨M⟩] = σ² E[g ∧ T]`.
    pub pre_g_energy: Estimate,
}

/// Drift energy summaries of one path: energy after `g + offset` for each
/// offset, and the energy on `[0, g ∧ T)`.
fn path_energies(
    x: &[f64],
    alpha: &[f64],
    g: Option<usize>,
    t_idx: usize,
    offsets: &[usize],
    sigma: f64,
    dt: f64,
) -> (Vec<f64>, f64) {
    let term = |i: usize| sigma * sigma * x[i] * x[i] * alpha[i] * alpha[i] * dt;
    let stop = stop_node(g, t_idx);
    let pre: f64 = (0..stop).map(term).sum();
    let post = offsets
        .iter()
        .map(|&k| match g {
            Some(g) if g + k < t_idx => (g + k..t_idx).map(term).sum(),
            _ => 0.0,
        })
        .collect();
    (post, pre)
}

fn delta_offsets(grid: &TimeGrid, deltas: &[f64]) -> Result<Vec<usize>> {
    if deltas.is_empty() {
        return Err(LabError::config("delta list is empty"));
    }
    if deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(LabError::config("every delta must be positive"));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LabError::config("delta list must be strictly decreasing"));
    }
    Ok(deltas.iter().map(|&d| grid.steps_covering(d).max(1)).collect())
}

fn energy_report(
    deltas: &[f64],
    offsets: &[usize],
    per_path: &[Vec<f64>],
    pre: &[f64],
    conditioning: &[Vec<bool>],
    any_before_horizon: bool,
) -> Result<DriftEnergyReport> {
    let k = deltas.len();
    let n = per_path.len();
    if !any_before_horizon {
        return Err(LabError::InsufficientData(
            "no path has its honest time before the horizon".into(),
        ));
    }
    let mut points = Vec::with_capacity(k);
    let mut col = vec![0.0; n];
    for j in 0..k {
        for (c, e) in col.iter_mut().zip(per_path) {
            *c = e[j];
        }
        let cond: Vec<f64> = per_path
            .iter()
            .zip(conditioning)
            .filter(|(_, c)| c[j])
            .map(|(e, _)| e[j])
            .collect();
        points.push(EnergyPoint {
            delta: deltas[j],
            offset_steps: offsets[j],
            mean: Estimate::from_samples(&col),
            n_conditioning: cond.len(),
            conditional_mean: (!cond.is_empty()).then(|| Estimate::from_samples(&cond)),
        });
    }
    let xs: Vec<f64> = deltas.iter().map(|d| (1.0 / d).ln()).collect();
    let slope = if k >= 2 {
        let wts = ols_slope_weights(&xs);
        let slopes: Vec<f64> = per_path
            .iter()
            .map(|e| e.iter().zip(&wts).map(|(a, b)| a * b).sum())
            .collect();
        Estimate::from_samples(&slopes)
    } else {
        Estimate {
            mean: f64::NAN,
            std_error: f64::NAN,
            n,
        }
    };
    let strictly_increasing =
        k >= 2 && points.windows(2).all(|w| w[1].mean.mean > w[0].mean.mean);
    Ok(DriftEnergyReport {
        strictly_increasing,
        slope_significant: slope.mean > 3.0 * slope.std_error,
        slope,
        points,
        pre_g_energy: Estimate::from_samples(pre),
    })
}

/// Energy of the information drift after `g + δ` for each `δ` (strictly decreasing).
pub fn information_drift_energy(
    paths: &HonestTimePaths,
    deltas: &[f64],
) -> Result<DriftEnergyReport> {
    let offsets = delta_offsets(&paths.grid, deltas)?;
    let t_idx = paths.horizon_index;
    let (sigma, dt) = (paths.scenario.sigma, paths.grid.dt());
    let mut per_path = Vec::with_capacity(paths.n_paths());
    let mut pre = Vec::with_capacity(paths.n_paths());
    let mut cond = Vec::with_capacity(paths.n_paths());
    for p in 0..paths.n_paths() {
        let (e, q) = path_energies(
            paths.x.row(p),
            paths.alpha.row(p),
            paths.g[p],
            t_idx,
            &offsets,
            sigma,
            dt,
        );
        per_path.push(e);
        pre.push(q);
        cond.push(
            offsets
                .iter()
                .map(|&k| paths.g[p].is_some_and(|g| g + k < t_idx))
                .collect(),
        );
    }
    let any = paths.g.iter().any(|g| g.is_some_and(|g| g < t_idx));
    energy_report(deltas, &offsets, &per_path, &pre, &cond, any)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub c: f64,
    /// Entropy, energy and objective `H - ½E^Q[σ²(T∧g)]` of `Q^(c)`.
    pub report: EntropyReport,
    /// `c(2+c)/2 · σ² E^{Q^(c)}[T∧g]`.
    pub oracle: Estimate,
    /// Density mean within 5 SE of 1.
    pub usable: bool,
}

/// Objective of the perturbation family `dQ^(c)/dP = E(-(1+c)σŴ_{·∧g∧T})`
/// from per-path `(τ, log X_τ)`.
pub fn entropy_from_stop_points(
    sigma: f64,
    stops: &[(f64, f64)],
    c_grid: &[f64],
) -> Result<Vec<EntropyPoint>> {
    if !c_grid.contains(&0.0) {
        return Err(LabError::config("c_grid must contain 0"));
    }
    if c_grid.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
        return Err(LabError::config("c_grid entries must be finite and >= 0"));
    }
    let s2 = sigma * sigma;
    let energy: Vec<f64> = stops.iter().map(|(tau, _)| s2 * tau).collect();
    c_grid
        .iter()
        .map(|&c| {
            let density: Vec<f64> = stops
                .iter()
                .map(|&(tau, lx)| (-(1.0 + c) * lx - 0.5 * c * (1.0 + c) * s2 * tau).exp())
                .collect();
            let report = relative_entropy_with_energy(&density, &energy, None)?;
            let k = 0.5 * c * (2.0 + c);
            let oracle_terms: Vec<f64> = density
                .iter()
                .zip(&energy)
                .map(|(d, e)| k * d * e)
                .collect();
            Ok(EntropyPoint {
                c,
                usable: report.density_mean.within(1.0, 5.0),
                oracle: Estimate::from_samples(&oracle_terms),
                report,
            })
        })
        .collect()
}

/// Entropy objective of the family `Q^(c)` on simulated paths.
pub fn entropy_objective_honest(
    paths: &HonestTimePaths,
    c_grid: &[f64],
) -> Result<Vec<EntropyPoint>> {
    entropy_from_stop_points(paths.scenario.sigma, &paths.stop_points(), c_grid)
}

/// Analyses collected by [`HonestTimeStudy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    /// Offsets after `g` for the drift energy, strictly decreasing.
    pub deltas: Vec<f64>,
    pub c_grid: Vec<f64>,
    /// Node indices (at most the horizon node) for the supermartingale audits.
    pub checkpoints: Vec<usize>,
    /// Denominator floors for the sensitivity report.
    pub floors: Vec<f64>,
    pub long_only: Vec<StrategySpec>,
    /// Buckets and post-`g` offset (steps) of the `Ŵ` increment test; 0 buckets disables it.
    pub increment_buckets: usize,
    pub increment_offset: usize,
}

impl StudyPlan {
    /// Defaults for a grid: `δ = 2⁻³..2⁻⁹ · T`, `c ∈ {0, 0.25, 0.5, 1}`,
    /// quarter checkpoints, floors `1e-4, 1e-6, 1e-8`, the default long-only set.
    pub fn standard(grid: &TimeGrid, horizon: f64) -> Result<Self> {
        let t_idx = grid.index_at(horizon)?;
        let mut checkpoints: Vec<usize> = (0..=4).map(|k| k * t_idx / 4).collect();
        checkpoints.dedup();
        Ok(StudyPlan {
            deltas: (3..=9).map(|k| horizon * 0.5f64.powi(k)).collect(),
            c_grid: vec![0.0, 0.25, 0.5, 1.0],
            checkpoints,
            floors: vec![1e-4, 1e-6, 1e-8],
            long_only: default_long_only_set(),
            increment_buckets: 4,
            increment_offset: 10,
        })
    }
}

/// What the study keeps of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSummary {
    pub g: Option<usize>,
    pub sup: f64,
    pub overall_sup: f64,
    pub tail_bound: f64,
    pub tau: f64,
    pub log_x_tau: f64,
    pub qs_terminal: f64,
    pub x_checkpoints: Vec<f64>,
    pub stopped_x_checkpoints: Vec<f64>,
    pub energies: Vec<f64>,
    pub pre_g_energy: f64,
    pub floor_energies: Vec<f64>,
    pub floor_binding: Vec<bool>,
    pub short_gain: f64,
    pub long_only_gains: Vec<f64>,
    pub increment_cells: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorPoint {
    pub floor: f64,
    /// `E[∫_{g}^{T} α² d⟨M⟩]` from the first node after `g`, with this floor.
    pub post_g_energy: Estimate,
    /// Share of paths where the floor replaced `S - X` at some node.
    pub binding: Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub mean_tail_bound: Estimate,
    pub trunc_eps: f64,
    pub resolve_tail: bool,
    /// Paths whose honest time lies beyond `T_sim`.
    pub beyond_sim: Frequency,
    /// Paths with `g < T`.
    pub before_horizon: Frequency,
}

/// Honest-time analyses over a large ensemble, evaluated chunk by chunk.
#[derive(Debug, Clone)]
pub struct HonestTimeStudy {
    pub scenario: HonestTimeScenario,
    pub grid: TimeGrid,
    pub seed: u64,
    pub antithetic: bool,
    pub plan: StudyPlan,
    pub horizon_index: usize,
    pub summaries: Vec<PathSummary>,
    increment_layout: Option<CellLayout>,
}

fn check_plan(plan: &StudyPlan, grid: &TimeGrid, t_idx: usize) -> Result<Vec<usize>> {
    let offsets = delta_offsets(grid, &plan.deltas)?;
    if let Some(&c) = plan.checkpoints.iter().find(|&&c| c > t_idx) {
        return Err(LabError::config(format!(
            "checkpoint node {c} lies after the horizon node {t_idx}"
        )));
    }
    if plan.floors.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
        return Err(LabError::config("floors must lie in (0,1)"));
    }
    for s in &plan.long_only {
        s.validate()?;
        if !s.long_only {
            return Err(LabError::config(format!(
                "strategy '{}' in the long-only set is not marked long-only",
                s.name
            )));
        }
    }
    Ok(offsets)
}

fn summarize_chunk(
    paths: &HonestTimePaths,
    plan: &StudyPlan,
    offsets: &[usize],
    layout: Option<&CellLayout>,
) -> Result<Vec<PathSummary>> {
    let t_idx = paths.horizon_index;
    let (sigma, dt) = (paths.scenario.sigma, paths.grid.dt());
    let short = insider_short_spec();
    let rplus = qs_density(paths);
    (0..paths.n_paths())
        .map(|p| {
            let (x, g, sup) = (paths.x.row(p), paths.g[p], paths.sup[p]);
            let (tau, log_x_tau) = stop_point(g, sup, x[t_idx], t_idx, &paths.grid);
            let stop = stop_node(g, t_idx);
            let (energies, pre_g_energy) =
                path_energies(x, paths.alpha.row(p), g, t_idx, offsets, sigma, dt);
            let mut floor_energies = Vec::with_capacity(plan.floors.len());
            let mut floor_binding = Vec::with_capacity(plan.floors.len());
            for &f in &plan.floors {
                let (mut e, mut bound) = (0.0, false);
                if let Some(g) = g {
                    for xi in &x[(g + 1).min(t_idx)..t_idx] {
                        let gap = sup - xi;
                        let den = gap.max(f * sup);
                        bound |= gap < f * sup;
                        e += sigma * sigma * xi * xi / (den * den) * dt;
                    }
                }
                floor_energies.push(e);
                floor_binding.push(bound);
            }
            let ctx = paths.context(p);
            let short_gain = short.path_gain(&ctx, paths.paths.start + p)?;
            let long_only_gains = plan
                .long_only
                .iter()
                .map(|s| s.path_gain(&ctx, paths.paths.start + p))
                .collect::<Result<Vec<_>>>()?;
            let increment_cells = match layout {
                None => Vec::new(),
                Some(l) => {
                    let n = x.len();
                    let before: Vec<f64> = (0..n)
                        .map(|i| f64::from(u8::from(g.map_or(true, |g| i < g))))
                        .collect();
                    let after: Vec<f64> = (0..n)
                        .map(|i| {
                            f64::from(u8::from(
                                g.is_some_and(|g| i >= g + plan.increment_offset),
                            ))
                        })
                        .collect();
                    l.increment_cells(paths.w_hat.row(p), &[&before, &after], 1.0)
                }
            };
            Ok(PathSummary {
                g,
                sup,
                overall_sup: paths.overall_sup[p],
                tail_bound: paths.tail_bound[p],
                tau,
                log_x_tau,
                qs_terminal: rplus.get(p, t_idx),
                x_checkpoints: plan.checkpoints.iter().map(|&c| x[c]).collect(),
                stopped_x_checkpoints: plan.checkpoints.iter().map(|&c| x[c.min(stop)]).collect(),
                energies,
                pre_g_energy,
                floor_energies,
                floor_binding,
                short_gain,
                long_only_gains,
                increment_cells,
            })
        })
        .collect()
}

impl HonestTimeStudy {
    /// Simulates `n_paths` paths in chunks of `chunk` and keeps per-path summaries.
    pub fn run(
        scenario: &HonestTimeScenario,
        grid: &TimeGrid,
        n_paths: usize,
        seed: u64,
        antithetic: bool,
        plan: StudyPlan,
        chunk: usize,
    ) -> Result<Self> {
        let t_idx = scenario.horizon_index(grid)?;
        if n_paths == 0 {
            return Err(LabError::config("n_paths must be at least 1"));
        }
        let offsets = check_plan(&plan, grid, t_idx)?;
        let layout = if plan.increment_buckets > 0 && t_idx > 0 {
            Some(CellLayout::new(
                vec!["before_g".into(), "after_g_plus_offset".into()],
                0..t_idx,
                plan.increment_buckets,
                grid.dt(),
            )?)
        } else {
            None
        };
        let summaries = par_map_chunks(n_paths, chunk, |r| {
            let paths = simulate_honest_time_range(scenario, grid, r, seed, antithetic)?;
            summarize_chunk(&paths, &plan, &offsets, layout.as_ref())
        })?;
        let tails: Vec<f64> = summaries.iter().map(|s| s.tail_bound).collect();
        check_truncation(scenario, &tails)?;
        Ok(HonestTimeStudy {
            scenario: *scenario,
            grid: *grid,
            seed,
            antithetic,
            plan,
            horizon_index: t_idx,
            summaries,
            increment_layout: layout,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.summaries.len()
    }

    fn column(&self, f: impl Fn(&PathSummary) -> f64) -> Vec<f64> {
        self.summaries.iter().map(f).collect()
    }

    pub fn qs_terminal(&self) -> Vec<f64> {
        self.column(|s| s.qs_terminal)
    }

    /// Martingale defect of `R⁺` (expected: none).
    pub fn qs_defect(&self) -> Result<DefectReport> {
        martingale_defect(&self.qs_terminal(), None, 0.0)
    }

    fn checkpoint_times(&self) -> Vec<f64> {
        self.plan.checkpoints.iter().map(|&c| self.grid.node(c)).collect()
    }

    /// Audit of `t ↦ E^Q[X_t]` with `Q = Q^S` or, unweighted, `P`.
    pub fn x_monotonicity(&self, qs_weighted: bool) -> Result<MonotoneReport> {
        let rows: Vec<Vec<f64>> = self.summaries.iter().map(|s| s.x_checkpoints.clone()).collect();
        let w = self.weights(qs_weighted);
        monotonicity_from_rows(&rows, &w, &self.checkpoint_times())
    }

    /// Audit of the stopped price `X_{t∧g}`: a strict submartingale under `P`
    /// in the insider's filtration, a martingale under `Q^S`.
    pub fn stopped_x_monotonicity(&self, qs_weighted: bool) -> Result<MonotoneReport> {
        let rows: Vec<Vec<f64>> = self
            .summaries
            .iter()
            .map(|s| s.stopped_x_checkpoints.clone())
            .collect();
        let w = self.weights(qs_weighted);
        monotonicity_from_rows(&rows, &w, &self.checkpoint_times())
    }

    fn weights(&self, qs_weighted: bool) -> Vec<f64> {
        if qs_weighted {
            self.qs_terminal()
        } else {
            vec![1.0; self.n_paths()]
        }
    }

    pub fn drift_energy(&self) -> Result<DriftEnergyReport> {
        let offsets = delta_offsets(&self.grid, &self.plan.deltas)?;
        let per_path: Vec<Vec<f64>> = self.summaries.iter().map(|s| s.energies.clone()).collect();
        let pre = self.column(|s| s.pre_g_energy);
        let cond: Vec<Vec<bool>> = self
            .summaries
            .iter()
            .map(|s| {
                offsets
                    .iter()
                    .map(|&k| s.g.is_some_and(|g| g + k < self.horizon_index))
                    .collect()
            })
            .collect();
        let any = self
            .summaries
            .iter()
            .any(|s| s.g.is_some_and(|g| g < self.horizon_index));
        energy_report(&self.plan.deltas, &offsets, &per_path, &pre, &cond, any)
    }

    pub fn entropy(&self) -> Result<Vec<EntropyPoint>> {
        let stops: Vec<(f64, f64)> = self.summaries.iter().map(|s| (s.tau, s.log_x_tau)).collect();
        entropy_from_stop_points(self.scenario.sigma, &stops, &self.plan.c_grid)
    }

    pub fn short_audit(&self) -> Result<ArbitrageReport> {
        let spec = insider_short_spec();
        ArbitrageReport::from_gains(&spec.name, spec.initial_wealth, &self.column(|s| s.short_gain))
    }

    pub fn long_only_audit(&self) -> Result<Vec<LongOnlyReport>> {
        let qs = self.qs_terminal();
        self.plan
            .long_only
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                LongOnlyReport::from_gains(spec, &self.column(|s| s.long_only_gains[k]), &qs)
            })
            .collect()
    }

    pub fn floor_sensitivity(&self) -> Vec<FloorPoint> {
        let n = self.n_paths();
        self.plan
            .floors
            .iter()
            .enumerate()
            .map(|(k, &floor)| FloorPoint {
                floor,
                post_g_energy: Estimate::from_samples(&self.column(|s| s.floor_energies[k])),
                binding: Frequency::new(
                    self.summaries.iter().filter(|s| s.floor_binding[k]).count(),
                    n,
                ),
            })
            .collect()
    }

    pub fn truncation(&self) -> TruncationReport {
        let n = self.n_paths();
        TruncationReport {
            mean_tail_bound: Estimate::from_samples(&self.column(|s| s.tail_bound)),
            trunc_eps: self.scenario.trunc_eps,
            resolve_tail: self.scenario.resolve_tail,
            beyond_sim: Frequency::new(self.summaries.iter().filter(|s| s.g.is_none()).count(), n),
            before_horizon: Frequency::new(
                self.summaries
                    .iter()
                    .filter(|s| s.g.is_some_and(|g| g < self.horizon_index))
                    .count(),
                n,
            ),
        }
    }

    /// `P(S_∞ >= level)` per level.
    pub fn sup_exceedance(&self, levels: &[f64]) -> Vec<Frequency> {
        levels
            .iter()
            .map(|&l| {
                Frequency::new(
                    self.summaries.iter().filter(|s| s.overall_sup >= l).count(),
                    self.n_paths(),
                )
            })
            .collect()
    }

    /// Increment test of `Ŵ` on `{t < g}` and `{t >= g + offset}` over `[0, T]`.
    pub fn increment_test(&self) -> Option<OrthogonalityReport> {
        let layout = self.increment_layout.as_ref()?;
        let cells: Vec<Vec<f64>> = self
            .summaries
            .iter()
            .map(|s| s.increment_cells.clone())
            .collect();
        Some(layout.report(
            &cells,
            format!(
                "increments of W_hat before g and from {} steps after g",
                self.plan.increment_offset
            ),
        ))
    }
}
