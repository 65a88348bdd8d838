//! Discrete stochastic calculus on grid tracks.
//!
//! Integrands are sampled at left endpoints, which is how predictability
//! shows up on a grid: `(∫H dY)_{t_i} = Σ_{j<i} H_{t_j} (Y_{t_{j+1}} - Y_{t_j})`.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::ProcessTrack;
use crate::error::{LabError, Result};
use crate::stats::Estimate;

/// Failure threshold for increment t-statistics.
pub const T_STAT_THRESHOLD: f64 = 4.0;

/// Itô integral of `integrand` against the level track `driver`.
pub fn ito_integral(integrand: &ProcessTrack, driver: &ProcessTrack) -> Result<ProcessTrack> {
    integrand.same_shape(driver)?;
    let label = format!("int({})d({})", integrand.label(), driver.label());
    let mut out = ProcessTrack::zeros(label, integrand.n_paths(), integrand.n_nodes());
    out.par_rows_mut().enumerate().for_each(|(p, row)| {
        let h = integrand.row(p);
        let y = driver.row(p);
        let mut acc = 0.0;
        for i in 1..row.len() {
            acc += h[i - 1] * (y[i] - y[i - 1]);
            row[i] = acc;
        }
    });
    Ok(out)
}

/// Itô integral against stored forward increments (`increments[i] = Y_{i+1} - Y_i`).
pub fn ito_integral_increments(
    integrand: &ProcessTrack,
    increments: &ProcessTrack,
) -> Result<ProcessTrack> {
    integrand.same_shape(increments)?;
    let label = format!("int({})d({})", integrand.label(), increments.label());
    let mut out = ProcessTrack::zeros(label, integrand.n_paths(), integrand.n_nodes());
    out.par_rows_mut().enumerate().for_each(|(p, row)| {
        let h = integrand.row(p);
        let dy = increments.row(p);
        let mut acc = 0.0;
        for i in 1..row.len() {
            acc += h[i - 1] * dy[i - 1];
            row[i] = acc;
        }
    });
    Ok(out)
}

/// Realised quadratic variation `[Y]_{t_i} = Σ_{j<i} (ΔY_j)²`.
pub fn quadratic_variation(track: &ProcessTrack) -> ProcessTrack {
    let mut out = ProcessTrack::zeros(
        format!("[{}]", track.label()),
        track.n_paths(),
        track.n_nodes(),
    );
    out.par_rows_mut().enumerate().for_each(|(p, row)| {
        let y = track.row(p);
        let mut acc = 0.0;
        for i in 1..row.len() {
            let d = y[i] - y[i - 1];
            acc += d * d;
            row[i] = acc;
        }
    });
    out
}

fn check_starts_at_zero(y: &ProcessTrack) -> Result<()> {
    for p in 0..y.n_paths() {
        if y.n_nodes() > 0 && y.get(p, 0) != 0.0 {
            return Err(LabError::config(format!(
                "stochastic exponential needs {}_0 = 0, path {p} starts at {}",
                y.label(),
                y.get(p, 0)
            )));
        }
    }
    Ok(())
}

/// `log E(Y) = Y - ½[Y]` with the realised bracket.
pub fn log_stochastic_exponential(y: &ProcessTrack) -> Result<ProcessTrack> {
    check_starts_at_zero(y)?;
    let mut out = ProcessTrack::zeros(
        format!("logE({})", y.label()),
        y.n_paths(),
        y.n_nodes(),
    );
    out.par_rows_mut().enumerate().for_each(|(p, row)| {
        let yr = y.row(p);
        let mut acc = 0.0;
        for i in 1..row.len() {
            let d = yr[i] - yr[i - 1];
            acc += d - 0.5 * d * d;
            row[i] = acc;
        }
    });
    Ok(out)
}

/// Doléans-Dade exponential of a continuous-model track, built by the
/// recursion `Z_{i+1} = Z_i · exp(ΔY_i - ½(ΔY_i)²)` so that it equals
/// `exp(Y - ½[Y])` and stays strictly positive.
pub fn stochastic_exponential(y: &ProcessTrack) -> Result<ProcessTrack> {
    check_starts_at_zero(y)?;
    let mut out = ProcessTrack::zeros(format!("E({})", y.label()), y.n_paths(), y.n_nodes());
    let overflow = out
        .par_rows_mut()
        .enumerate()
        .filter_map(|(p, row)| {
            let yr = y.row(p);
            let mut z = 1.0;
            row[0] = 1.0;
            for i in 1..row.len() {
                let d = yr[i] - yr[i - 1];
                z *= (d - 0.5 * d * d).exp();
                if !z.is_finite() || z == 0.0 {
                    return Some((p, i));
                }
                row[i] = z;
            }
            None
        })
        .min();
    match overflow {
        Some((path, node)) => Err(LabError::Overflow { path, node }),
        None => Ok(out),
    }
}

/// One `(functional, bucket)` cell of an increment test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityEntry {
    pub functional: String,
    pub bucket: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub entries: Vec<OrthogonalityEntry>,
    pub max_abs_t: f64,
    pub threshold: f64,
    pub failures: usize,
    pub passed: bool,
    /// Cells with zero spread (functional identically zero) are not tested.
    pub skipped_cells: usize,
    pub note: String,
}

/// Layout of a cell matrix: functional labels × contiguous step buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLayout {
    pub functionals: Vec<String>,
    pub buckets: Vec<Range<usize>>,
    pub bucket_times: Vec<(f64, f64)>,
}

impl CellLayout {
    /// Splits `steps` into `n_buckets` contiguous ranges.
    pub fn new(
        functionals: Vec<String>,
        steps: Range<usize>,
        n_buckets: usize,
        dt: f64,
    ) -> Result<Self> {
        let len = steps.len();
        if n_buckets == 0 || len == 0 {
            return Err(LabError::config("increment test needs at least one bucket and step"));
        }
        let n_buckets = n_buckets.min(len);
        let buckets: Vec<Range<usize>> = (0..n_buckets)
            .map(|b| {
                let s = steps.start + b * len / n_buckets;
                let e = steps.start + (b + 1) * len / n_buckets;
                s..e
            })
            .collect();
        let bucket_times = buckets
            .iter()
            .map(|r| (r.start as f64 * dt, r.end as f64 * dt))
            .collect();
        Ok(CellLayout {
            functionals,
            buckets,
            bucket_times,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.functionals.len() * self.buckets.len()
    }

    /// Per-path cell values `w · Σ_{i∈bucket} f_i ΔM_i` from row slices.
    pub fn increment_cells(&self, m: &[f64], functionals: &[&[f64]], weight: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_cells());
        for f in functionals {
            for r in &self.buckets {
                let mut acc = 0.0;
                for i in r.clone() {
                    acc += f[i] * (m[i + 1] - m[i]);
                }
                out.push(weight * acc);
            }
        }
        out
    }

    /// Reduces per-path cell vectors (path order) into a report.
    pub fn report(&self, per_path: &[Vec<f64>], note: impl Into<String>) -> OrthogonalityReport {
        let n_cells = self.n_cells();
        let nb = self.buckets.len();
        let mut entries = Vec::new();
        let mut skipped = 0;
        let mut column = vec![0.0; per_path.len()];
        for c in 0..n_cells {
            for (dst, row) in column.iter_mut().zip(per_path) {
                *dst = row[c];
            }
            let est = Estimate::from_samples(&column);
            if !(est.std_error > 0.0) {
                skipped += 1;
                continue;
            }
            let b = c % nb;
            entries.push(OrthogonalityEntry {
                functional: self.functionals[c / nb].clone(),
                bucket: b,
                t_start: self.bucket_times[b].0,
                t_end: self.bucket_times[b].1,
                estimate: est.mean,
                std_error: est.std_error,
                t_stat: est.mean / est.std_error,
            });
        }
        let max_abs_t = entries.iter().map(|e| e.t_stat.abs()).fold(0.0, f64::max);
        let failures = entries
            .iter()
            .filter(|e| e.t_stat.abs() > T_STAT_THRESHOLD)
            .count();
        let note = format!(
            "{}; {} tests at |t| > {T_STAT_THRESHOLD}: Bonferroni family-wise false-positive rate <= {:.1e}",
            note.into(),
            entries.len(),
            entries.len() as f64 * 6.334e-5
        );
        OrthogonalityReport {
            entries,
            max_abs_t,
            threshold: T_STAT_THRESHOLD,
            failures,
            passed: failures == 0,
            skipped_cells: skipped,
            note,
        }
    }
}

/// Tests `E[w · ΔM · f] = 0` per functional and time bucket.
///
/// Functionals must be adapted: the value at `t_i` may only depend on the
/// path up to `t_i`. This cannot be verified from the data and is the
/// caller's contract. `weights` are per-path terminal densities of a changed
/// measure.
pub fn martingale_increment_test(
    m: &ProcessTrack,
    functionals: &[&ProcessTrack],
    weights: Option<&[f64]>,
    n_buckets: usize,
    dt: f64,
) -> Result<OrthogonalityReport> {
    for f in functionals {
        m.same_shape(f)?;
    }
    if let Some(w) = weights {
        if w.len() != m.n_paths() {
            return Err(LabError::config(format!(
                "{} weights for {} paths",
                w.len(),
                m.n_paths()
            )));
        }
        if let Some(p) = w.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(LabError::NonFinite {
                what: "increment-test weights".into(),
                path: p,
                node: m.n_nodes() - 1,
            });
        }
    }
    let layout = CellLayout::new(
        functionals.iter().map(|f| f.label().to_string()).collect(),
        0..m.n_nodes() - 1,
        n_buckets,
        dt,
    )?;
    let cells: Vec<Vec<f64>> = (0..m.n_paths())
        .into_par_iter()
        .map(|p| {
            let rows: Vec<&[f64]> = functionals.iter().map(|f| f.row(p)).collect();
            layout.increment_cells(m.row(p), &rows, weights.map_or(1.0, |w| w[p]))
        })
        .collect();
    Ok(layout.report(&cells, format!("increments of {}", m.label())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{build_grid, sample_brownian};
    use crate::stats::Estimate;

    fn w_track(n: usize, steps: usize, seed: u64) -> (ProcessTrack, f64) {
        let g = build_grid(1.0, steps).unwrap();
        let e = sample_brownian(&g, n, seed, false).unwrap();
        (e.get("W").unwrap().clone(), g.dt())
    }

    #[test]
    fn zero_integrand_gives_zero() {
        let (w, _) = w_track(4, 16, 1);
        let h = ProcessTrack::zeros("H", 4, 17);
        let i = ito_integral(&h, &w).unwrap();
        assert!(i.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_integrand_telescopes() {
        let (w, _) = w_track(4, 16, 2);
        let h = ProcessTrack::constant("1", 4, 17, 1.0);
        let i = ito_integral(&h, &w).unwrap();
        for (a, b) in i.values().iter().zip(w.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (w, _) = w_track(4, 16, 2);
        let h = ProcessTrack::constant("1", 3, 17, 1.0);
        assert!(matches!(
            ito_integral(&h, &w),
            Err(LabError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ito_formula_for_w_dw() {
        // ∫W dW = (W_T² - [W]_T)/2 holds exactly on the grid with the realised
        // bracket; against T it holds in mean.
        let (w, _) = w_track(100_000, 64, 3);
        let iw = ito_integral(&w, &w).unwrap();
        let qv = quadratic_variation(&w);
        let n = w.n_nodes() - 1;
        let mut lhs = Vec::new();
        let mut rhs = Vec::new();
        for p in 0..w.n_paths() {
            let wt = w.get(p, n);
            assert!((iw.get(p, n) - 0.5 * (wt * wt - qv.get(p, n))).abs() < 1e-12);
            lhs.push(iw.get(p, n));
            rhs.push(0.5 * (wt * wt - 1.0));
        }
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        let e = Estimate::from_samples(&diff);
        assert!(e.within(0.0, 3.0), "{e:?}");
    }

    #[test]
    fn constant_track_has_no_variation() {
        let t = ProcessTrack::constant("c", 3, 10, 4.2);
        assert!(quadratic_variation(&t).values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn brownian_bracket_is_time() {
        let (w, _) = w_track(2_000, 4096, 4);
        let qv = quadratic_variation(&w).terminal();
        let e = Estimate::from_samples(&qv);
        // Var [W]_1 = 2Δ, so the mean is within 1e-4 at this size
        assert!((e.mean - 1.0).abs() < 0.01, "{e:?}");
    }

    #[test]
    fn exponential_of_zero_is_one() {
        let y = ProcessTrack::zeros("Y", 2, 8);
        let z = stochastic_exponential(&y).unwrap();
        assert!(z.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn exponential_needs_zero_start() {
        let y = ProcessTrack::constant("Y", 2, 8, 1.0);
        assert!(stochastic_exponential(&y).is_err());
    }

    #[test]
    fn exponential_overflow_is_reported() {
        let y = ProcessTrack::from_rows("Y", &[vec![0.0, 400.0, 1200.0, 2400.0]]).unwrap();
        assert!(matches!(
            stochastic_exponential(&y),
            Err(LabError::Overflow { .. })
        ));
        let l = log_stochastic_exponential(&y).unwrap();
        assert!(l.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exponential_martingale_has_unit_mean() {
        let (w, _) = w_track(100_000, 64, 5);
        let y = w.map("0.2W", |v| 0.2 * v);
        let z = stochastic_exponential(&y).unwrap();
        let e = Estimate::from_samples(&z.terminal());
        assert!(e.within(1.0, 3.0), "{e:?}");
        assert!(z.values().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn exponential_recursion_is_exact() {
        let (w, _) = w_track(3, 32, 6);
        let y = w.map("Y", |v| 0.7 * v);
        let z = stochastic_exponential(&y).unwrap();
        for p in 0..3 {
            let (zr, yr) = (z.row(p), y.row(p));
            for i in 0..32 {
                let d = yr[i + 1] - yr[i];
                assert_eq!(zr[i + 1], zr[i] * (d - 0.5 * d * d).exp());
            }
        }
    }

    #[test]
    fn yor_product_for_independent_drivers() {
        let g = build_grid(1.0, 2048).unwrap();
        let a = sample_brownian(&g, 200, 7, false).unwrap();
        let b = sample_brownian(&g, 400, 8, false).unwrap();
        let w1 = a.get("W").unwrap().map("Y", |v| 0.3 * v);
        let w2 = ProcessTrack::from_rows(
            "Y'",
            &(200..400)
                .map(|p| b.get("W").unwrap().row(p).iter().map(|v| 0.4 * v).collect())
                .collect::<Vec<Vec<f64>>>(),
        )
        .unwrap();
        let sum = w1.zip_with(&w2, "Y+Y'", |x, y| x + y).unwrap();
        let (z1, z2, zs) = (
            stochastic_exponential(&w1).unwrap(),
            stochastic_exponential(&w2).unwrap(),
            stochastic_exponential(&sum).unwrap(),
        );
        let mut worst: f64 = 0.0;
        for p in 0..200 {
            let n = g.n_steps();
            let rel = (z1.get(p, n) * z2.get(p, n) / zs.get(p, n)).ln();
            worst = worst.max(rel.abs());
        }
        // cross bracket Σ ΔY ΔY' is O(√Δ) with unit-order constants
        assert!(worst < 0.15, "{worst}");
    }

    #[test]
    fn increment_test_accepts_brownian_motion() {
        let (w, dt) = w_track(100_000, 64, 9);
        let one = ProcessTrack::constant("1", w.n_paths(), w.n_nodes(), 1.0);
        let r = martingale_increment_test(&w, &[&one], None, 8, dt).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_abs_t < 4.0);
    }

    #[test]
    fn increment_test_rejects_drift() {
        let g = build_grid(1.0, 64).unwrap();
        let e = sample_brownian(&g, 100_000, 10, false).unwrap();
        let w = e.get("W").unwrap();
        let drifted = ProcessTrack::from_fn("W+t", w.n_paths(), w.n_nodes(), |p, i| {
            w.get(p, i) + g.node(i)
        });
        let one = ProcessTrack::constant("1", w.n_paths(), w.n_nodes(), 1.0);
        let r = martingale_increment_test(&drifted, &[&one], None, 8, g.dt()).unwrap();
        assert!(!r.passed);
        assert!(r.max_abs_t > 50.0, "{}", r.max_abs_t);
    }

    #[test]
    fn zero_functional_cells_are_skipped() {
        let (w, dt) = w_track(100, 16, 11);
        let zero = ProcessTrack::zeros("0", 100, 17);
        let r = martingale_increment_test(&w, &[&zero], None, 4, dt).unwrap();
        assert_eq!(r.skipped_cells, 4);
        assert!(r.entries.is_empty());
    }
}
