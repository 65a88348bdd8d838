//! The `Q*`-world: a Brownian motion `B`, an independent sign `η` and the
//! density `D* = 1 + η B_{·∧stop}` with `P = D*_T · Q*`.
//!
//! Under `P` the price `X = x₀ + B` picks up the drift `α = η/D*` in the
//! filtration that knows `η`. The minimal martingale density `R = E(-∫α dM)`
//! equals `1/D*` before the stop and `R⁺ = E(-∫α⁺ dM)` ignores the paths with
//! `η = -1`. In the absorbing variant `D*` reaches 0 with positive
//! probability, the measures stop being equivalent and both densities lose
//! mass: `E_P[R_T] = 1 - Q*(T₀ < T)`. In the stopped variant `D*` stays in
//! `[1-a, 1+a]` and both are true martingales.
//!
//! Every `P`-expectation is a `Q*`-expectation weighted by `D*_T`.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{CellLayout, OrthogonalityReport};
use crate::engine::{
    fill_increments, par_map_chunks, path_rng, ProcessTrack, Stream, TimeGrid,
};
use crate::error::{LabError, Result};
use crate::measures::{martingale_defect, richardson_margin, DefectReport, Verdict};
use crate::stats::{Estimate, Frequency};

/// Bridge checks are skipped when the crossing probability is below `e^-32`.
const BRIDGE_EXPONENT_CUTOFF: f64 = 32.0;

/// A step is bisected while `D*` at its start is below this many `√h`.
const REFINE_SCALE: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabVariant {
    /// `D*` stopped when it first reaches 0.
    Absorbing,
    /// `D*` stopped when `B` first leaves `(-a, a)`.
    Stopped { a: f64 },
    /// `G ≡ 0`: `D* ≡ 1`, `α ≡ 0`.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityLabScenario {
    pub variant: LabVariant,
    pub horizon: f64,
    #[serde(default = "default_x0")]
    pub x0: f64,
    /// Maximum number of Brownian-bridge bisections of a step close to
    /// absorption; 0 keeps the plain grid.
    #[serde(default = "default_refine_depth")]
    pub refine_depth: u32,
}

fn default_x0() -> f64 {
    10.0
}

fn default_refine_depth() -> u32 {
    14
}

impl Default for DensityLabScenario {
    fn default() -> Self {
        DensityLabScenario {
            variant: LabVariant::Absorbing,
            horizon: 1.0,
            x0: default_x0(),
            refine_depth: default_refine_depth(),
        }
    }
}

impl DensityLabScenario {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let LabVariant::Stopped { a } = self.variant {
            if !(a > 0.0 && a < 1.0) {
                errs.push(format!(
                    "density_lab.variant.a must lie in (0,1), got {a}"
                ));
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            errs.push(format!(
                "density_lab.horizon must be > 0, got {}",
                self.horizon
            ));
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            errs.push(format!("density_lab.x0 must be > 0, got {}", self.x0));
        }
        if self.refine_depth > 30 {
            errs.push(format!(
                "density_lab.refine_depth must be at most 30, got {}",
                self.refine_depth
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

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        self.validate()?;
        if (grid.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(LabError::config(format!(
                "grid horizon {} differs from the scenario horizon {}",
                grid.horizon(),
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Per-path stopping information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopInfo {
    /// Node from which `D*` is constant; `None` when it never stops.
    pub index: Option<usize>,
    /// Fraction of the stopping step elapsed at the stop.
    pub fraction: f64,
    /// `D*` reached 0.
    pub absorbed: bool,
}

impl StopInfo {
    fn never() -> Self {
        StopInfo {
            index: None,
            fraction: 1.0,
            absorbed: false,
        }
    }

    /// Stopping time on the grid.
    pub fn time(&self, dt: f64) -> Option<f64> {
        self.index.map(|s| ((s - 1) as f64 + self.fraction) * dt)
    }
}

/// Lab paths for a block of global path indices.
///
/// `R`, `R⁺` and `M` are built with the simulation because steps close to
/// absorption are refined below the grid.
#[derive(Debug, Clone)]
pub struct LabPaths {
    pub scenario: DensityLabScenario,
    pub grid: TimeGrid,
    pub paths: Range<usize>,
    pub b: ProcessTrack,
    pub x: ProcessTrack,
    pub d: ProcessTrack,
    pub g: ProcessTrack,
    pub alpha: ProcessTrack,
    /// `M = B - ∫α d⟨M⟩`, the `P`-martingale part of `B`.
    pub m: ProcessTrack,
    pub r: ProcessTrack,
    pub r_plus: ProcessTrack,
    pub eta: Vec<f64>,
    pub stops: Vec<StopInfo>,
}

fn bridge_cross(rng: &mut ChaCha8Rng, exponent: f64) -> bool {
    exponent < BRIDGE_EXPONENT_CUTOFF && rng.random::<f64>() < (-exponent).exp()
}

/// Sign `η` of a global path.
pub fn path_sign(seed: u64, path: usize) -> f64 {
    if path_rng(seed, path, Stream::Auxiliary).random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// State of one path inside a grid step.
struct Walker {
    variant: LabVariant,
    eta: f64,
    max_depth: u32,
    b: f64,
    d: f64,
    r: f64,
    r_plus: f64,
    m: f64,
}

impl Walker {
    fn new(variant: LabVariant, eta: f64, max_depth: u32) -> Self {
        Walker {
            variant,
            eta,
            max_depth,
            b: 0.0,
            d: 1.0,
            r: 1.0,
            r_plus: 1.0,
            m: 0.0,
        }
    }

    /// Advances over `[b0, b1]` of length `h`; returns the time elapsed up
    /// to the stop when `D*` stops inside.
    fn interval(&mut self, b1: f64, h: f64, depth: u32, rng: &mut ChaCha8Rng) -> Option<f64> {
        let b0 = self.b;
        let near_zero = matches!(self.variant, LabVariant::Absorbing)
            && depth < self.max_depth
            && self.d < REFINE_SCALE * h.sqrt();
        if near_zero {
            let z: f64 = rng.sample(StandardNormal);
            let mid = 0.5 * (b0 + b1) + 0.5 * h.sqrt() * z;
            if let Some(t) = self.interval(mid, 0.5 * h, depth + 1, rng) {
                return Some(t);
            }
            return self.interval(b1, 0.5 * h, depth + 1, rng).map(|t| t + 0.5 * h);
        }
        self.leaf(b1, h, rng)
    }

    fn leaf(&mut self, b1: f64, h: f64, rng: &mut ChaCha8Rng) -> Option<f64> {
        let (b0, d0, eta) = (self.b, self.d, self.eta);
        let hit = match self.variant {
            LabVariant::Degenerate => None,
            LabVariant::Absorbing => {
                let d1 = 1.0 + eta * b1;
                if d1 <= 0.0 {
                    Some((0.0, d0 / (d0 - d1)))
                } else if bridge_cross(rng, 2.0 * d0 * d1 / h) {
                    Some((0.0, 0.5))
                } else {
                    None
                }
            }
            LabVariant::Stopped { a } => {
                let level = |barrier: f64| 1.0 + eta * barrier;
                if b1 >= a {
                    Some((level(a), (a - b0) / (b1 - b0)))
                } else if b1 <= -a {
                    Some((level(-a), (b0 + a) / (b0 - b1)))
                } else {
                    let up = 2.0 * (a - b0) * (a - b1) / h;
                    let dn = 2.0 * (a + b0) * (a + b1) / h;
                    if up < BRIDGE_EXPONENT_CUTOFF || dn < BRIDGE_EXPONENT_CUTOFF {
                        let u: f64 = rng.random();
                        let (pu, pd) = ((-up).exp(), (-dn).exp());
                        if u < pu {
                            Some((level(a), 0.5))
                        } else if u < pu + pd {
                            Some((level(-a), 0.5))
                        } else {
                            None
                        }
                    } else {
                        None
                    }
                }
            }
        };
        let alpha = if matches!(self.variant, LabVariant::Degenerate) {
            0.0
        } else {
            eta / d0
        };
        let (db, dq, stop) = match hit {
            Some((value, theta)) => {
                let theta = theta.clamp(0.0, 1.0);
                ((value - d0) / eta, theta * h, Some((value, theta * h)))
            }
            None => (b1 - b0, h, None),
        };
        let dm = db - alpha * dq;
        // R = 1/D* diverges at absorption; keep the last finite value there.
        let absorbing = matches!(stop, Some((value, _)) if value == 0.0);
        let unresolved = matches!(self.variant, LabVariant::Absorbing) && d0 < h.sqrt();
        if unresolved && !absorbing {
            // Exact local solution of dR = -R alpha dM given the D* move.
            let ratio = d0 / (d0 + eta * db);
            self.r *= ratio;
            if alpha > 0.0 {
                self.r_plus *= ratio;
            }
        } else if !absorbing {
            let y = -alpha * dm;
            let yp = -alpha.max(0.0) * dm;
            self.r *= (y - 0.5 * y * y).exp();
            self.r_plus *= (yp - 0.5 * yp * yp).exp();
        }
        self.m += dm;
        self.b = b0 + db;
        match stop {
            Some((value, elapsed)) => {
                self.d = value;
                Some(elapsed)
            }
            None => {
                if !matches!(self.variant, LabVariant::Degenerate) {
                    self.d = 1.0 + eta * b1;
                }
                None
            }
        }
    }
}

/// Output rows of one path.
struct LabRows<'a> {
    d: &'a mut [f64],
    g: &'a mut [f64],
    alpha: &'a mut [f64],
    m: &'a mut [f64],
    r: &'a mut [f64],
    r_plus: &'a mut [f64],
}

/// Runs one path from its Brownian levels `b`.
fn lab_path(
    scenario: &DensityLabScenario,
    b: &[f64],
    eta: f64,
    dt: f64,
    bridge: &mut ChaCha8Rng,
    rows: LabRows<'_>,
) -> StopInfo {
    let n = b.len() - 1;
    let degenerate = matches!(scenario.variant, LabVariant::Degenerate);
    let mut w = Walker::new(scenario.variant, eta, scenario.refine_depth);
    let mut stop = StopInfo::never();
    rows.d[0] = 1.0;
    rows.m[0] = 0.0;
    rows.r[0] = 1.0;
    rows.r_plus[0] = 1.0;
    for i in 0..n {
        let active = !degenerate && stop.index.is_none();
        rows.g[i] = if active { eta } else { 0.0 };
        rows.alpha[i] = if active { eta / rows.d[i] } else { 0.0 };
        if active {
            if let Some(elapsed) = w.interval(b[i + 1], dt, 0, bridge) {
                stop = StopInfo {
                    index: Some(i + 1),
                    fraction: (elapsed / dt).clamp(0.0, 1.0),
                    absorbed: w.d == 0.0,
                };
            }
            rows.d[i + 1] = w.d;
            rows.r[i + 1] = w.r;
            rows.r_plus[i + 1] = w.r_plus;
            rows.m[i + 1] = w.m + (b[i + 1] - w.b);
        } else {
            rows.d[i + 1] = rows.d[i];
            rows.r[i + 1] = rows.r[i];
            rows.r_plus[i + 1] = rows.r_plus[i];
            rows.m[i + 1] = rows.m[i] + (b[i + 1] - b[i]);
        }
    }
    let active = !degenerate && stop.index.is_none();
    rows.g[n] = if active { eta } else { 0.0 };
    rows.alpha[n] = if active { eta / rows.d[n] } else { 0.0 };
    stop
}

fn sample_levels(grid: &TimeGrid, seed: u64, path: usize, antithetic: bool, b: &mut [f64]) {
    let n = grid.n_steps();
    fill_increments(&mut b[1..], seed, path, Stream::Brownian, grid.dt(), antithetic);
    b[0] = 0.0;
    for i in 0..n {
        b[i + 1] += b[i];
    }
}

/// Simulates the lab for global paths `paths`.
pub fn simulate_lab_range(
    scenario: &DensityLabScenario,
    grid: &TimeGrid,
    paths: Range<usize>,
    seed: u64,
    antithetic: bool,
) -> Result<LabPaths> {
    scenario.check_grid(grid)?;
    if paths.is_empty() {
        return Err(LabError::config("n_paths must be at least 1"));
    }
    let mut b = ProcessTrack::zeros("B", paths.len(), grid.n_nodes());
    for (p, path) in paths.clone().enumerate() {
        sample_levels(grid, seed, path, antithetic, b.row_mut(p));
    }
    lab_from_levels(scenario, grid, paths, seed, b)
}

/// Lab paths driven by given Brownian levels (one row per global path in `paths`).
pub fn lab_from_levels(
    scenario: &DensityLabScenario,
    grid: &TimeGrid,
    paths: Range<usize>,
    seed: u64,
    b: ProcessTrack,
) -> Result<LabPaths> {
    scenario.check_grid(grid)?;
    let (n_paths, nn) = b.shape();
    if n_paths != paths.len() || nn != grid.n_nodes() {
        return Err(LabError::ShapeMismatch {
            left: "B".into(),
            left_shape: b.shape(),
            right: "grid".into(),
            right_shape: (paths.len(), grid.n_nodes()),
        });
    }
    let mut d = ProcessTrack::zeros("D*", n_paths, nn);
    let mut g = ProcessTrack::zeros("G", n_paths, nn);
    let mut alpha = ProcessTrack::zeros("alpha", n_paths, nn);
    let mut m = ProcessTrack::zeros("M", n_paths, nn);
    let mut r = ProcessTrack::zeros("R", n_paths, nn);
    let mut r_plus = ProcessTrack::zeros("R+", n_paths, nn);
    let mut eta = Vec::with_capacity(n_paths);
    let mut stops = Vec::with_capacity(n_paths);
    for (p, path) in paths.clone().enumerate() {
        let e = path_sign(seed, path);
        let mut bridge = path_rng(seed, path, Stream::Bridge);
        let rows = LabRows {
            d: d.row_mut(p),
            g: g.row_mut(p),
            alpha: alpha.row_mut(p),
            m: m.row_mut(p),
            r: r.row_mut(p),
            r_plus: r_plus.row_mut(p),
        };
        stops.push(lab_path(scenario, b.row(p), e, grid.dt(), &mut bridge, rows));
        eta.push(e);
    }
    let x0 = scenario.x0;
    let x = b.map("X", |v| x0 + v);
    let frozen: Vec<usize> = stops.iter().map(|s| s.index.unwrap_or(nn - 1)).collect();
    Ok(LabPaths {
        scenario: *scenario,
        grid: *grid,
        paths,
        b,
        x,
        d: d.with_stop_index(frozen.clone())?,
        g,
        alpha,
        m,
        r: r.with_stop_index(frozen.clone())?,
        r_plus: r_plus.with_stop_index(frozen)?,
        eta,
        stops,
    })
}

/// Simulates paths `0..n_paths`.
pub fn simulate_lab(
    scenario: &DensityLabScenario,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<LabPaths> {
    simulate_lab_range(scenario, grid, 0..n_paths, seed, antithetic)
}

/// Minimal martingale and supermartingale densities `R = E(-∫α dM)` and
/// `R⁺ = E(-∫α⁺ dM)`.
pub fn lab_densities(paths: &LabPaths) -> (&ProcessTrack, &ProcessTrack) {
    (&paths.r, &paths.r_plus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectPair {
    pub r: DefectReport,
    pub r_plus: DefectReport,
    /// Coarse-grid defects used for the Richardson margins.
    pub coarse_defects: Option<(f64, f64)>,
}

impl DefectPair {
    /// Strict verdicts agree.
    pub fn coherent(&self) -> bool {
        (self.r.verdict == Verdict::StrictLocalMartingale)
            == (self.r_plus.verdict == Verdict::StrictLocalMartingale)
    }

    pub fn check_coherent(&self) -> Result<()> {
        if self.coherent() {
            return Ok(());
        }
        Err(LabError::Consistency(format!(
            "defect verdicts disagree: R is {:?} (defect {:.4}), R+ is {:?} (defect {:.4}); refine the grid",
            self.r.verdict, self.r.defect, self.r_plus.verdict, self.r_plus.defect
        )))
    }
}

/// Terminal values on one grid: `D*_T`, `R_T`, `R⁺_T`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Terminal {
    pub d: f64,
    pub r: f64,
    pub r_plus: f64,
}

/// Defects of `R` and `R⁺` under `P = D*_T Q*`, with Richardson margins
/// from the same paths on the half-step grid when `coarse` is given.
/// Fails when exactly one of the two verdicts is strict.
pub fn defect_pair(fine: &[Terminal], coarse: Option<&[Terminal]>) -> Result<DefectPair> {
    let pair = defect_reports(fine, coarse)?;
    pair.check_coherent()?;
    Ok(pair)
}

/// [`defect_pair`] without the coherence check.
pub fn defect_reports(fine: &[Terminal], coarse: Option<&[Terminal]>) -> Result<DefectPair> {
    let split = |t: &[Terminal]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            t.iter().map(|v| v.d).collect(),
            t.iter().map(|v| v.r).collect(),
            t.iter().map(|v| v.r_plus).collect(),
        )
    };
    let (d, r, rp) = split(fine);
    let (mr, mrp, coarse_defects) = match coarse {
        None => (0.0, 0.0, None),
        Some(c) => {
            if c.len() != fine.len() {
                return Err(LabError::config("coarse and fine runs differ in path count"));
            }
            let (cd, cr, crp) = split(c);
            let fr = martingale_defect(&r, Some(&d), 0.0)?;
            let frp = martingale_defect(&rp, Some(&d), 0.0)?;
            let gr = martingale_defect(&cr, Some(&cd), 0.0)?;
            let grp = martingale_defect(&crp, Some(&cd), 0.0)?;
            (
                richardson_margin(fr.mean_estimate, gr.mean_estimate),
                richardson_margin(frp.mean_estimate, grp.mean_estimate),
                Some((gr.defect, grp.defect)),
            )
        }
    };
    Ok(DefectPair {
        r: martingale_defect(&r, Some(&d), mr)?,
        r_plus: martingale_defect(&rp, Some(&d), mrp)?,
        coarse_defects,
    })
}

/// Terminal values of a simulated block at the horizon.
pub fn terminals(paths: &LabPaths) -> Vec<Terminal> {
    let last = paths.grid.n_steps();
    (0..paths.b.n_paths())
        .map(|p| Terminal {
            d: paths.d.get(p, last),
            r: paths.r.get(p, last),
            r_plus: paths.r_plus.get(p, last),
        })
        .collect()
}

/// Same paths on the half-step grid (common Brownian increments and signs).
pub fn coarsen_lab(paths: &LabPaths, seed: u64) -> Result<LabPaths> {
    let grid = paths.grid.coarsen()?;
    let (n, _) = paths.b.shape();
    let mut b = ProcessTrack::zeros("B", n, grid.n_nodes());
    for p in 0..n {
        let fine = paths.b.row(p);
        for (j, v) in b.row_mut(p).iter_mut().enumerate() {
            *v = fine[2 * j];
        }
    }
    lab_from_levels(&paths.scenario, &grid, paths.paths.clone(), seed, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauStats {
    pub horizon: f64,
    pub t0: Frequency,
    pub tau: Frequency,
    pub tau_plus: Frequency,
    /// `{τ⁺<T} ⊆ {τ<T} ⊆ {T₀<T}` on every path.
    pub nested: bool,
    /// All three positive or all three zero.
    pub equivalent: bool,
}

/// Per-path indicators `(T₀<T, τ<T, τ⁺<T)`.
///
/// `τ` (`τ⁺`) is the first zero of `1/R` (`1/R⁺`): the absorption of `D*`
/// when `α` (`α⁺`) is active up to it.
pub fn tau_flags(paths: &LabPaths) -> Vec<(bool, bool, bool)> {
    (0..paths.b.n_paths())
        .map(|p| {
            let s = paths.stops[p];
            let t0 = s.absorbed && s.index.is_some();
            let active = s.index.map_or(0.0, |k| paths.alpha.get(p, k - 1));
            (t0, t0 && active != 0.0, t0 && active > 0.0)
        })
        .collect()
}

pub fn tau_stats_from_flags(flags: &[(bool, bool, bool)], horizon: f64) -> TauStats {
    let n = flags.len();
    let c0 = flags.iter().filter(|f| f.0).count();
    let c1 = flags.iter().filter(|f| f.1).count();
    let c2 = flags.iter().filter(|f| f.2).count();
    let nested = flags.iter().all(|&(a, b, c)| (!c || b) && (!b || a));
    let positive = [c0, c1, c2].map(|c| c > 0);
    TauStats {
        horizon,
        t0: Frequency::new(c0, n),
        tau: Frequency::new(c1, n),
        tau_plus: Frequency::new(c2, n),
        nested,
        equivalent: positive.iter().all(|&b| b) || positive.iter().all(|&b| !b),
    }
}

/// Frequencies of `{T₀<T}`, `{τ<T}`, `{τ⁺<T}` under `Q*`.
pub fn tau_statistics(paths: &LabPaths) -> TauStats {
    tau_stats_from_flags(&tau_flags(paths), paths.grid.horizon())
}

/// F-adapted test functionals of the null-projection check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullFunctional {
    One,
    Level,
    Sign,
}

impl NullFunctional {
    pub fn label(&self) -> &'static str {
        match self {
            NullFunctional::One => "one",
            NullFunctional::Level => "B",
            NullFunctional::Sign => "sign_B",
        }
    }

    pub fn eval(&self, b: f64) -> f64 {
        match self {
            NullFunctional::One => 1.0,
            NullFunctional::Level => b,
            NullFunctional::Sign => {
                if b > 0.0 {
                    1.0
                } else if b < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn all() -> Vec<NullFunctional> {
        vec![NullFunctional::One, NullFunctional::Level, NullFunctional::Sign]
    }
}

/// Layout with one cell per functional and checkpoint (the end of each bucket).
pub fn null_projection_layout(
    grid: &TimeGrid,
    functionals: &[NullFunctional],
    n_checkpoints: usize,
) -> Result<CellLayout> {
    CellLayout::new(
        functionals.iter().map(|f| f.label().to_string()).collect(),
        0..grid.n_steps(),
        n_checkpoints,
        grid.dt(),
    )
}

/// Per-path cells `G_t f(B_t)` at each checkpoint.
pub fn null_projection_cells(
    layout: &CellLayout,
    functionals: &[NullFunctional],
    b: &[f64],
    g: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.n_cells());
    for f in functionals {
        for r in &layout.buckets {
            out.push(g[r.end] * f.eval(b[r.end]));
        }
    }
    out
}

/// Tests `E_{Q*}[G_t f(B_t)] = 0` at `n_checkpoints` times.
pub fn null_projection_test(
    paths: &LabPaths,
    functionals: &[NullFunctional],
    n_checkpoints: usize,
) -> Result<OrthogonalityReport> {
    let layout = null_projection_layout(&paths.grid, functionals, n_checkpoints)?;
    let cells: Vec<Vec<f64>> = (0..paths.b.n_paths())
        .map(|p| null_projection_cells(&layout, functionals, paths.b.row(p), paths.g.row(p)))
        .collect();
    Ok(layout.report(&cells, "G_t f(B_t) at bucket ends"))
}

/// Analyses collected by [`LabStudy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabPlan {
    /// Run the half-step grid on the same paths for Richardson margins.
    pub richardson: bool,
    pub null_functionals: Vec<NullFunctional>,
    pub null_checkpoints: usize,
    /// Buckets of the immersion check; 0 disables it.
    pub immersion_buckets: usize,
}

impl Default for LabPlan {
    fn default() -> Self {
        LabPlan {
            richardson: true,
            null_functionals: NullFunctional::all(),
            null_checkpoints: 4,
            immersion_buckets: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabSummary {
    pub eta: f64,
    pub stop: StopInfo,
    pub fine: Terminal,
    pub coarse: Option<Terminal>,
    pub flags: (bool, bool, bool),
    pub min_d: f64,
    pub max_d: f64,
    pub min_x: f64,
    /// `max |D* R - 1|` over nodes before the stop.
    pub factorization_error: f64,
    pub null_cells: Vec<f64>,
    pub immersion_cells: Vec<f64>,
    pub immersion_weight: f64,
}

/// Density-lab analyses over a large ensemble, evaluated chunk by chunk.
#[derive(Debug, Clone)]
pub struct LabStudy {
    pub scenario: DensityLabScenario,
    pub grid: TimeGrid,
    pub seed: u64,
    pub antithetic: bool,
    pub plan: LabPlan,
    pub summaries: Vec<LabSummary>,
    null_layout: CellLayout,
    immersion_layout: Option<CellLayout>,
}

fn summarize_lab(
    paths: &LabPaths,
    plan: &LabPlan,
    seed: u64,
    null_layout: &CellLayout,
    immersion_layout: Option<&CellLayout>,
) -> Result<Vec<LabSummary>> {
    let last = paths.grid.n_steps();
    let r = &paths.r;
    let fine = terminals(paths);
    let coarse = if plan.richardson {
        Some(terminals(&coarsen_lab(paths, seed)?))
    } else {
        None
    };
    let flags = tau_flags(paths);
    let n = paths.b.n_paths();
    Ok((0..n)
        .map(|p| {
            let d = paths.d.row(p);
            let rr = r.row(p);
            let stop = paths.stops[p];
            let before = stop.index.unwrap_or(last + 1);
            let factorization_error = (0..before.min(last + 1))
                .map(|i| (d[i] * rr[i] - 1.0).abs())
                .fold(0.0, f64::max);
            let eta_row = vec![paths.eta[p]; last + 1];
            let immersion_weight = fine[p].d * fine[p].r;
            let immersion_cells = immersion_layout.map_or_else(Vec::new, |l| {
                l.increment_cells(paths.x.row(p), &[&eta_row], immersion_weight)
            });
            LabSummary {
                eta: paths.eta[p],
                stop,
                fine: fine[p],
                coarse: coarse.as_ref().map(|c| c[p]),
                flags: flags[p],
                min_d: d.iter().copied().fold(f64::INFINITY, f64::min),
                max_d: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                min_x: paths.x.row(p).iter().copied().fold(f64::INFINITY, f64::min),
                factorization_error,
                null_cells: null_projection_cells(
                    null_layout,
                    &plan.null_functionals,
                    paths.b.row(p),
                    paths.g.row(p),
                ),
                immersion_cells,
                immersion_weight,
            }
        })
        .collect())
}

impl LabStudy {
    pub fn run(
        scenario: &DensityLabScenario,
        grid: &TimeGrid,
        n_paths: usize,
        seed: u64,
        antithetic: bool,
        plan: LabPlan,
        chunk: usize,
    ) -> Result<Self> {
        scenario.check_grid(grid)?;
        if n_paths == 0 {
            return Err(LabError::config("n_paths must be at least 1"));
        }
        if plan.richardson {
            grid.coarsen()?;
        }
        let null_layout =
            null_projection_layout(grid, &plan.null_functionals, plan.null_checkpoints)?;
        let immersion_layout = if plan.immersion_buckets > 0 {
            Some(CellLayout::new(
                vec!["eta".into()],
                0..grid.n_steps(),
                plan.immersion_buckets,
                grid.dt(),
            )?)
        } else {
            None
        };
        let summaries = par_map_chunks(n_paths, chunk, |r| {
            let paths = simulate_lab_range(scenario, grid, r, seed, antithetic)?;
            summarize_lab(&paths, &plan, seed, &null_layout, immersion_layout.as_ref())
        })?;
        Ok(LabStudy {
            scenario: *scenario,
            grid: *grid,
            seed,
            antithetic,
            plan,
            summaries,
            null_layout,
            immersion_layout,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.summaries.len()
    }

    pub fn defect_pair(&self) -> Result<DefectPair> {
        let pair = self.defect_reports()?;
        pair.check_coherent()?;
        Ok(pair)
    }

    /// Both defect reports, coherent or not.
    pub fn defect_reports(&self) -> Result<DefectPair> {
        let fine: Vec<Terminal> = self.summaries.iter().map(|s| s.fine).collect();
        let coarse: Option<Vec<Terminal>> = self.summaries.iter().map(|s| s.coarse).collect();
        defect_reports(&fine, coarse.as_deref())
    }

    pub fn tau_statistics(&self) -> TauStats {
        let flags: Vec<_> = self.summaries.iter().map(|s| s.flags).collect();
        tau_stats_from_flags(&flags, self.grid.horizon())
    }

    pub fn null_projection(&self) -> OrthogonalityReport {
        let cells: Vec<Vec<f64>> = self.summaries.iter().map(|s| s.null_cells.clone()).collect();
        self.null_layout.report(&cells, "G_t f(B_t) at bucket ends")
    }

    /// Increment test of `X` against the functional `η` under `Q^M = R_T·P`.
    pub fn immersion_check(&self) -> Option<OrthogonalityReport> {
        let layout = self.immersion_layout.as_ref()?;
        let cells: Vec<Vec<f64>> = self
            .summaries
            .iter()
            .map(|s| s.immersion_cells.clone())
            .collect();
        Some(layout.report(&cells, "increments of X against eta, weights D*_T R_T"))
    }

    /// `E_{Q*}[D*_T]`.
    pub fn density_mean(&self) -> Estimate {
        let d: Vec<f64> = self.summaries.iter().map(|s| s.fine.d).collect();
        Estimate::from_samples(&d)
    }

    pub fn density_range(&self) -> (f64, f64) {
        self.summaries.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.min_d), hi.max(s.max_d))
        })
    }

    /// Paths on which `X = x₀ + B` reached 0 or below.
    pub fn positivity_violations(&self) -> Frequency {
        Frequency::new(
            self.summaries.iter().filter(|s| s.min_x <= 0.0).count(),
            self.n_paths(),
        )
    }

    pub fn max_factorization_error(&self) -> f64 {
        self.summaries
            .iter()
            .map(|s| s.factorization_error)
            .fold(0.0, f64::max)
    }
}
