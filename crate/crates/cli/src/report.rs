//! Run reports: a deterministic `results` payload plus run metrics.

use std::path::Path;

use insiderlab::calculus::OrthogonalityReport;
use insiderlab::density_lab::{DefectPair, TauStats};
use insiderlab::factorization::{OrthogonalProductReport, RegimeSwitchReport};
use insiderlab::honest_time::{DriftEnergyReport, EntropyPoint, FloorPoint, TruncationReport};
use insiderlab::measures::{DefectReport, MonotoneReport};
use insiderlab::stats::{Estimate, Frequency};
use insiderlab::strategies::{ArbitrageReport, LongOnlyReport};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const ARTIFACT: &str = "insiderlab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub artifact: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub results: Results,
    /// Invariants that failed during the run; non-empty means exit code 2.
    pub consistency_failures: Vec<String>,
    pub metrics: Metrics,
}

/// Wall-clock figures; the only part of a report that varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub wall_clock_s: f64,
    pub paths_per_s: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case", deny_unknown_fields)]
pub enum Results {
    HonestTime(HonestTimeResults),
    DensityLab(DensityLabResults),
    Factorization(FactorizationResults),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupermartingaleAudit {
    /// `t ↦ E^{Q^S}[X_t]`.
    pub x_under_qs: MonotoneReport,
    /// `t ↦ E^{Q^S}[X_{t∧g}]`.
    pub stopped_x_under_qs: MonotoneReport,
    /// `t ↦ E^P[X_{t∧g}]`, expected to rise.
    pub stopped_x_under_p: MonotoneReport,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEnergyResult {
    /// Status of the minimal martingale density `R`.
    pub minimal_martingale_density: String,
    pub profile: DriftEnergyReport,
    pub blow_up: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyResult {
    pub n_paths: usize,
    pub n_steps: usize,
    pub points: Vec<EntropyPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupExceedance {
    pub level: f64,
    pub frequency: Frequency,
    /// `P(sup X ≥ a) = 1/a`.
    pub oracle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HonestTimeResults {
    pub n_paths: usize,
    pub n_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<TruncationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qs_density: Option<DefectReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supermartingale: Option<SupermartingaleAudit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_audit: Option<ArbitrageReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long_only_audit: Option<Vec<LongOnlyReport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_energy: Option<DriftEnergyResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor_sensitivity: Option<Vec<FloorPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub increment_test: Option<OrthogonalityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sup_exceedance: Option<Vec<SupExceedance>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySummary {
    /// `E_{Q*}[D*_T]`, equal to 1.
    pub mean: Estimate,
    pub min: f64,
    pub max: f64,
    /// Paths with `x₀ + B ≤ 0` somewhere on the grid.
    pub positivity_violations: Frequency,
    /// `max |D* R - 1|` before the stop.
    pub max_factorization_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityLabResults {
    pub n_paths: usize,
    pub n_steps: usize,
    pub density: DensitySummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defects: Option<DefectPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<TauStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_projection: Option<OrthogonalityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub immersion: Option<OrthogonalityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizationResults {
    pub n_paths: usize,
    pub n_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orthogonal_product: Option<OrthogonalProductReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime_switch: Option<RegimeSwitchReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The numeric payload: seed, results and consistency failures, without
    /// the config echo and the metrics.
    pub fn payload(&self) -> String {
        serde_json::to_string(&serde_json::json!({
            "seed": self.seed,
            "results": self.results,
            "consistency_failures": self.consistency_failures,
        }))
        .expect("payload serializes")
    }

    pub fn exit_code(&self) -> i32 {
        if self.consistency_failures.is_empty() {
            0
        } else {
            2
        }
    }

    /// `results` flattened to `key,value` rows.
    pub fn results_csv(&self) -> CliResult<String> {
        let v = serde_json::to_value(&self.results).expect("results serialize");
        let mut rows = Vec::new();
        flatten("", &v, &mut rows);
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e: csv::Error| CliError::Consistency(format!("csv encoding: {e}"));
        w.write_record(["key", "value"]).map_err(to_err)?;
        for (k, val) in rows {
            w.write_record([k, val]).map_err(to_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::Consistency(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut out = vec![format!(
            "{} {} | {} | seed {} | {:.1}s, {} threads",
            self.artifact, self.version, self.command, self.seed, self.metrics.wall_clock_s, self.metrics.threads
        )];
        let v = serde_json::to_value(&self.results).expect("results serialize");
        let mut rows = Vec::new();
        flatten("", &v, &mut rows);
        for (k, val) in rows {
            if k.ends_with("passed")
                || k.ends_with("verdict")
                || k.ends_with("arbitrage_evidence")
                || k.ends_with("blow_up")
            {
                out.push(format!("  {k} = {val}"));
            }
        }
        for f in &self.consistency_failures {
            out.push(format!("  CONSISTENCY FAILURE: {f}"));
        }
        out.join("\n")
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&key(k), x, out);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&key(&i.to_string()), x, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Parses a stored report.
pub fn parse_report(text: &str) -> Result<RunReport, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

pub fn load_report(path: &Path) -> CliResult<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_report(&text).map_err(|message| CliError::Report {
        path: path.to_path_buf(),
        message,
    })
}
