//! Change-of-measure estimators over one ensemble.
//!
//! Every expectation under a changed measure `Q` is computed as a weighted
//! mean under the simulation measure: `E^Q[V] = E[ρ V]` with `ρ = dQ/dP` per
//! path. A second reweighting (`base_weights`) turns the simulation measure
//! into the model measure when they differ, as in the density lab where `P`
//! itself is `D*_T · Q*`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::stats::{pairwise_sum, Estimate};

/// Standard errors allowed between a density mean and 1 before warning.
pub const DENSITY_MEAN_TOLERANCE_SE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub estimate: Estimate,
    pub density_mean: Estimate,
    pub warning: Option<String>,
}

fn check_weights(what: &str, w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(LabError::config(format!(
            "{what} has {} entries for {n} values",
            w.len()
        )));
    }
    if let Some(p) = w.iter().position(|v| !v.is_finite()) {
        return Err(LabError::NonFinite {
            what: what.into(),
            path: p,
            node: 0,
        });
    }
    Ok(())
}

fn combine(density: &[f64], base: Option<&[f64]>) -> Vec<f64> {
    match base {
        None => density.to_vec(),
        Some(b) => density.iter().zip(b).map(|(d, b)| d * b).collect(),
    }
}

/// `Σ ρ_i v_i / n` with its standard error.
pub fn weighted_expectation(values: &[f64], density: &[f64]) -> Result<WeightedEstimate> {
    check_weights("density", density, values.len())?;
    if let Some(p) = values.iter().position(|v| !v.is_finite()) {
        return Err(LabError::NonFinite {
            what: "values".into(),
            path: p,
            node: 0,
        });
    }
    let products: Vec<f64> = values.iter().zip(density).map(|(v, w)| w * v).collect();
    let estimate = Estimate::from_samples(&products);
    let density_mean = Estimate::from_samples(density);
    let warning = (!density_mean.within(1.0, DENSITY_MEAN_TOLERANCE_SE)).then(|| {
        format!(
            "density mean {:.6} is {:.1} standard errors from 1",
            density_mean.mean,
            density_mean.t_stat(1.0).abs()
        )
    });
    Ok(WeightedEstimate {
        estimate,
        density_mean,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ConsistentWithMartingale,
    StrictLocalMartingale,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    /// Mean of the terminal density under the model measure.
    pub mean_estimate: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    /// `1 - mean_estimate`.
    pub defect: f64,
    pub discretization_margin: f64,
    pub verdict: Verdict,
    /// Empirical `E[ρ_T²]`; heavy tails can hide an infinite second moment.
    pub second_moment: Estimate,
}

/// Weak-order-one Richardson error estimate for the fine-grid mean given the
/// same paths on the half-step grid.
pub fn richardson_margin(fine_mean: f64, coarse_mean: f64) -> f64 {
    (fine_mean - coarse_mean).abs()
}

/// Martingale defect `1 - E[ρ_T]` and the strict-local-martingale verdict.
///
/// Strict when the defect exceeds `max(3·SE, margin)`, consistent with a
/// martingale when `|defect|` stays below it, inconclusive when the mean is
/// significantly above 1.
pub fn martingale_defect(
    density_t: &[f64],
    base_weights: Option<&[f64]>,
    discretization_margin: f64,
) -> Result<DefectReport> {
    if let Some(p) = density_t.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(LabError::NonFinite {
            what: "terminal density (must be finite and >= 0)".into(),
            path: p,
            node: 0,
        });
    }
    if let Some(b) = base_weights {
        check_weights("base weights", b, density_t.len())?;
    }
    let weighted = combine(density_t, base_weights);
    let est = Estimate::from_samples(&weighted);
    let second: Vec<f64> = match base_weights {
        None => density_t.iter().map(|d| d * d).collect(),
        Some(b) => density_t.iter().zip(b).map(|(d, b)| b * d * d).collect(),
    };
    let defect = 1.0 - est.mean;
    let band = (3.0 * est.std_error).max(discretization_margin);
    let verdict = if defect > band {
        Verdict::StrictLocalMartingale
    } else if defect.abs() <= band {
        Verdict::ConsistentWithMartingale
    } else {
        Verdict::Inconclusive
    };
    Ok(DefectReport {
        mean_estimate: est.mean,
        std_error: est.std_error,
        ci95: est.ci95(),
        defect,
        discretization_margin,
        verdict,
        second_moment: Estimate::from_samples(&second),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// `H(Q|P)` clamped below at `-3·SE`.
    pub h_estimate: f64,
    pub h_raw: f64,
    pub std_error: f64,
    pub density_mean: Estimate,
    /// `½ E^Q[energy]` when an energy per path was supplied.
    pub energy_term: Option<Estimate>,
    /// `H(Q|P) - ½ E^Q[energy]`, estimated path by path.
    pub objective: Option<Estimate>,
    /// False when some path has zero density with positive weight: `Q` then
    /// charges less than `P` and the two are not equivalent.
    pub q_equivalent_to_p: bool,
}

fn entropy_terms(
    density_t: &[f64],
    energy: Option<&[f64]>,
    base_weights: Option<&[f64]>,
) -> Result<EntropyReport> {
    if let Some(p) = density_t.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(LabError::NonFinite {
            what: "terminal density (must be finite and >= 0)".into(),
            path: p,
            node: 0,
        });
    }
    if let Some(b) = base_weights {
        check_weights("base weights", b, density_t.len())?;
    }
    if let Some(e) = energy {
        check_weights("energy", e, density_t.len())?;
    }
    let weight = |i: usize| base_weights.map_or(1.0, |b| b[i]);
    let mut equivalent = true;
    let h: Vec<f64> = density_t
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d == 0.0 {
                if weight(i) > 0.0 {
                    equivalent = false;
                }
                0.0
            } else {
                weight(i) * d * d.ln()
            }
        })
        .collect();
    let h_est = Estimate::from_samples(&h);
    let density_mean = Estimate::from_samples(&combine(density_t, base_weights));
    let (energy_term, objective) = match energy {
        None => (None, None),
        Some(e) => {
            let half: Vec<f64> = (0..density_t.len())
                .map(|i| 0.5 * weight(i) * density_t[i] * e[i])
                .collect();
            let obj: Vec<f64> = h.iter().zip(&half).map(|(a, b)| a - b).collect();
            (
                Some(Estimate::from_samples(&half)),
                Some(Estimate::from_samples(&obj)),
            )
        }
    };
    Ok(EntropyReport {
        h_estimate: h_est.mean.max(-3.0 * h_est.std_error),
        h_raw: h_est.mean,
        std_error: h_est.std_error,
        density_mean,
        energy_term,
        objective,
        q_equivalent_to_p: equivalent,
    })
}

/// `H(Q|P) = E[ρ log ρ]` from terminal densities `ρ = dQ/dP`.
pub fn relative_entropy(density_t: &[f64], base_weights: Option<&[f64]>) -> Result<EntropyReport> {
    entropy_terms(density_t, None, base_weights)
}

/// Relative entropy together with the penalised objective
/// `H(Q|P) - ½ E^Q[energy]` used to characterise the minimal supermartingale
/// measure; `energy` is `∫(α⁺)² d⟨X⟩` per path.
pub fn relative_entropy_with_energy(
    density_t: &[f64],
    energy: &[f64],
    base_weights: Option<&[f64]>,
) -> Result<EntropyReport> {
    entropy_terms(density_t, Some(energy), base_weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub checkpoints: Vec<f64>,
    /// Weighted mean of the process at each checkpoint.
    pub means: Vec<Estimate>,
    /// Paired weighted increments between consecutive checkpoints.
    pub increments: Vec<Estimate>,
    /// Indices `j` such that the mean rises from checkpoint `j` to `j+1` by more than 3 SE.
    pub flags: Vec<usize>,
    pub passed: bool,
}

/// Supermartingale audit from per-path checkpoint values (`rows[p][j]`).
pub fn monotonicity_from_rows(
    rows: &[Vec<f64>],
    density_t: &[f64],
    checkpoint_times: &[f64],
) -> Result<MonotoneReport> {
    check_weights("density", density_t, rows.len())?;
    let k = checkpoint_times.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(LabError::config("checkpoint rows do not match checkpoint times"));
    }
    let mut means = Vec::with_capacity(k);
    let mut col = vec![0.0; rows.len()];
    for j in 0..k {
        for (c, (r, w)) in col.iter_mut().zip(rows.iter().zip(density_t)) {
            *c = w * r[j];
        }
        means.push(Estimate::from_samples(&col));
    }
    let mut increments = Vec::with_capacity(k.saturating_sub(1));
    let mut flags = Vec::new();
    for j in 0..k.saturating_sub(1) {
        for (c, (r, w)) in col.iter_mut().zip(rows.iter().zip(density_t)) {
            *c = w * (r[j + 1] - r[j]);
        }
        let inc = Estimate::from_samples(&col);
        if inc.mean > 3.0 * inc.std_error {
            flags.push(j);
        }
        increments.push(inc);
    }
    Ok(MonotoneReport {
        checkpoints: checkpoint_times.to_vec(),
        means,
        increments,
        passed: flags.is_empty(),
        flags,
    })
}

/// Supermartingale audit of a track at the given node indices.
pub fn supermartingale_monotonicity(
    x: &crate::engine::ProcessTrack,
    density_t: &[f64],
    checkpoints: &[usize],
    dt: f64,
) -> Result<MonotoneReport> {
    if let Some(&c) = checkpoints.iter().find(|&&c| c >= x.n_nodes()) {
        return Err(LabError::config(format!("checkpoint node {c} is off the grid")));
    }
    let rows: Vec<Vec<f64>> = (0..x.n_paths())
        .map(|p| checkpoints.iter().map(|&c| x.get(p, c)).collect())
        .collect();
    let times: Vec<f64> = checkpoints.iter().map(|&c| c as f64 * dt).collect();
    monotonicity_from_rows(&rows, density_t, &times)
}

/// Weighted sum helper shared by studies.
pub fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    let prod: Vec<f64> = values.iter().zip(weights).map(|(v, w)| v * w).collect();
    pairwise_sum(&prod)
}
