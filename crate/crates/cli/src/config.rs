//! Run configuration: one scenario block, engine settings, the analyses to
//! run and where to write results.

use std::path::{Path, PathBuf};

use insiderlab::density_lab::DensityLabScenario;
use insiderlab::engine::TimeGrid;
use insiderlab::factorization::{FactorizationMode, FactorizationScenario};
use insiderlab::honest_time::{HonestTimeScenario, StudyPlan};
use insiderlab::strategies::StrategySpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioBlock,
    pub engine: EngineBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

/// Exactly one of the three fields must be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub honest_time: Option<HonestTimeScenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_lab: Option<DensityLabScenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factorization: Option<FactorizationScenario>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    HonestTime,
    DensityLab,
    Factorization,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario<'a> {
    HonestTime(&'a HonestTimeScenario),
    DensityLab(&'a DensityLabScenario),
    Factorization(&'a FactorizationScenario),
}

impl Scenario<'_> {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            Scenario::HonestTime(_) => ScenarioKind::HonestTime,
            Scenario::DensityLab(_) => ScenarioKind::DensityLab,
            Scenario::Factorization(_) => ScenarioKind::Factorization,
        }
    }

    /// Horizon of the simulation grid.
    pub fn grid_horizon(&self) -> f64 {
        match self {
            Scenario::HonestTime(s) => s.sim_horizon,
            Scenario::DensityLab(s) => s.horizon,
            Scenario::Factorization(s) => s.horizon,
        }
    }

    /// Trading horizon `T`.
    pub fn horizon(&self) -> f64 {
        match self {
            Scenario::HonestTime(s) => s.horizon,
            Scenario::DensityLab(s) => s.horizon,
            Scenario::Factorization(s) => s.horizon,
        }
    }
}

impl ScenarioBlock {
    pub fn count(&self) -> usize {
        [
            self.honest_time.is_some(),
            self.density_lab.is_some(),
            self.factorization.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }

    pub fn single(&self) -> Option<Scenario<'_>> {
        if self.count() != 1 {
            return None;
        }
        self.honest_time
            .as_ref()
            .map(Scenario::HonestTime)
            .or(self.density_lab.as_ref().map(Scenario::DensityLab))
            .or(self.factorization.as_ref().map(Scenario::Factorization))
    }

    fn validation_errors(&self) -> Vec<String> {
        let n = self.count();
        if n != 1 {
            return vec![format!(
                "scenario: exactly one block of honest_time | density_lab | factorization is required, found {n}"
            )];
        }
        let (name, errs) = match self.single() {
            Some(Scenario::HonestTime(s)) => ("honest_time", s.validation_errors()),
            Some(Scenario::DensityLab(s)) => ("density_lab", s.validation_errors()),
            Some(Scenario::Factorization(s)) => ("factorization", s.validation_errors()),
            None => unreachable!(),
        };
        errs.into_iter()
            .map(|e| format!("scenario.{name}: {e}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineBlock {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    /// Paths per work unit; chosen from the grid size when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<usize>,
    /// Worker threads; all cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl EngineBlock {
    fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_paths < 2 {
            errs.push(format!("engine.n_paths must be at least 2, got {}", self.n_paths));
        }
        if self.n_steps < 1 {
            errs.push("engine.n_steps must be at least 1".into());
        }
        if self.chunk.is_some_and(|c| c < 2) {
            errs.push("engine.chunk must be at least 2".into());
        }
        if self.threads == Some(0) {
            errs.push("engine.threads must be at least 1".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    QsDensity,
    Supermartingale,
    ShortAudit,
    LongOnlyAudit,
    DriftEnergy,
    Entropy,
    FloorSensitivity,
    IncrementTest,
    SupExceedance,
    Defects,
    Tau,
    NullProjection,
    Immersion,
    OrthogonalProduct,
    RegimeSwitch,
}

impl Analysis {
    pub const ALL: [Analysis; 15] = [
        Analysis::QsDensity,
        Analysis::Supermartingale,
        Analysis::ShortAudit,
        Analysis::LongOnlyAudit,
        Analysis::DriftEnergy,
        Analysis::Entropy,
        Analysis::FloorSensitivity,
        Analysis::IncrementTest,
        Analysis::SupExceedance,
        Analysis::Defects,
        Analysis::Tau,
        Analysis::NullProjection,
        Analysis::Immersion,
        Analysis::OrthogonalProduct,
        Analysis::RegimeSwitch,
    ];

    pub fn scenario(&self) -> ScenarioKind {
        use Analysis::*;
        match self {
            QsDensity | Supermartingale | ShortAudit | LongOnlyAudit | DriftEnergy | Entropy
            | FloorSensitivity | IncrementTest | SupExceedance => ScenarioKind::HonestTime,
            Defects | Tau | NullProjection | Immersion => ScenarioKind::DensityLab,
            OrthogonalProduct | RegimeSwitch => ScenarioKind::Factorization,
        }
    }

    pub fn name(&self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    /// Analyses to run; empty runs every analysis of the scenario.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub run: Vec<Analysis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_grid: Option<Vec<f64>>,
    /// Offsets after `g` for the drift energy, strictly decreasing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_list: Option<Vec<f64>>,
    /// Checkpoint times of the supermartingale audits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floors: Option<Vec<f64>>,
    /// Long-only audit set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<StrategySpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub increment_buckets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub increment_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sup_levels: Option<Vec<f64>>,
    /// Path budget of the track-free entropy run; `engine.n_paths` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_steps: Option<usize>,
    /// Half-step rerun for the discretization margin of the defects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub richardson: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_checkpoints: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub immersion_buckets: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// Paths written to the CSV track dump.
    #[serde(default = "default_dump_paths")]
    pub dump_paths: usize,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Json]
}

fn default_dump_paths() -> usize {
    16
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            directory: default_directory(),
            formats: default_formats(),
            dump_paths: default_dump_paths(),
        }
    }
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub format: Option<Format>,
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] > w[1])
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl RunConfig {
    pub fn scenario(&self) -> Scenario<'_> {
        self.scenario
            .single()
            .expect("validated config has exactly one scenario")
    }

    pub fn grid(&self) -> CliResult<TimeGrid> {
        Ok(TimeGrid::new(
            self.scenario().grid_horizon(),
            self.engine.n_steps,
        )?)
    }

    /// Analyses to run, in a fixed order.
    pub fn analyses(&self) -> Vec<Analysis> {
        let kind = self.scenario().kind();
        let mut out: Vec<Analysis> = if self.analysis.run.is_empty() {
            Analysis::ALL
                .iter()
                .copied()
                .filter(|a| a.scenario() == kind)
                .filter(|a| match self.scenario() {
                    Scenario::Factorization(f) => match f.mode {
                        FactorizationMode::IndependentDrivers { .. } => *a == Analysis::OrthogonalProduct,
                        FactorizationMode::RegimeSwitch { .. } => *a == Analysis::RegimeSwitch,
                    },
                    _ => true,
                })
                .collect()
        } else {
            self.analysis.run.clone()
        };
        out.sort();
        out.dedup();
        out
    }

    /// Every violated precondition.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = self.scenario.validation_errors();
        errs.extend(self.engine.validation_errors());
        if self.output.formats.is_empty() {
            errs.push("output.formats must not be empty".into());
        }
        if !errs.is_empty() {
            return errs;
        }
        let scn = self.scenario();
        let kind = scn.kind();
        for a in &self.analysis.run {
            if a.scenario() != kind {
                errs.push(format!(
                    "analysis.run: '{}' does not apply to the {:?} scenario",
                    a.name(),
                    kind
                ));
            }
        }
        let grid = match self.grid() {
            Ok(g) => g,
            Err(e) => {
                errs.push(format!("engine: {e}"));
                return errs;
            }
        };
        let a = &self.analysis;
        match scn {
            Scenario::HonestTime(h) => {
                if let Err(e) = h.horizon_index(&grid) {
                    errs.push(format!("engine.n_steps: {e}"));
                }
                if let Some(c) = &a.c_grid {
                    if !c.contains(&0.0) {
                        errs.push("analysis.c_grid must contain 0".into());
                    }
                    if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        errs.push("analysis.c_grid entries must be finite and >= 0".into());
                    }
                }
                if let Some(d) = &a.delta_list {
                    if d.is_empty() || !strictly_decreasing(d) {
                        errs.push("analysis.delta_list must be non-empty and strictly decreasing".into());
                    }
                    if d.iter().any(|v| !(*v > 0.0 && *v < h.horizon)) {
                        errs.push("analysis.delta_list entries must lie in (0, horizon)".into());
                    }
                }
                if let Some(c) = &a.checkpoints {
                    if c.len() < 2 || !strictly_increasing(c) {
                        errs.push("analysis.checkpoints must hold at least 2 increasing times".into());
                    }
                    for t in c {
                        if !(*t >= 0.0 && *t <= h.horizon) {
                            errs.push(format!("analysis.checkpoints: {t} is outside [0, horizon]"));
                        } else if grid.index_at(*t).is_err() {
                            errs.push(format!("analysis.checkpoints: {t} is not a grid node"));
                        }
                    }
                }
                if let Some(f) = &a.floors {
                    if f.is_empty() || f.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                        errs.push("analysis.floors must be non-empty with entries in (0,1)".into());
                    }
                }
                if let Some(s) = &a.strategies {
                    for spec in s {
                        if let Err(e) = spec.validate() {
                            errs.push(format!("analysis.strategies: {e}"));
                        }
                    }
                }
                if let Some(l) = &a.sup_levels {
                    if l.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                        errs.push("analysis.sup_levels must be positive".into());
                    }
                }
                if a.entropy_paths.is_some_and(|n| n < 2) {
                    errs.push("analysis.entropy_paths must be at least 2".into());
                }
                if let Some(steps) = a.entropy_steps {
                    match TimeGrid::new(h.sim_horizon, steps) {
                        Ok(g) => {
                            if let Err(e) = h.horizon_index(&g) {
                                errs.push(format!("analysis.entropy_steps: {e}"));
                            }
                        }
                        Err(e) => errs.push(format!("analysis.entropy_steps: {e}")),
                    }
                }
            }
            Scenario::DensityLab(_) => {
                if a.richardson.unwrap_or(true) && self.engine.n_steps % 2 != 0 {
                    errs.push("engine.n_steps must be even for the Richardson rerun".into());
                }
                if a.null_checkpoints == Some(0) {
                    errs.push("analysis.null_checkpoints must be at least 1".into());
                }
                let steps = self.engine.n_steps;
                if a.null_checkpoints.unwrap_or(4) > steps {
                    errs.push("analysis.null_checkpoints exceeds engine.n_steps".into());
                }
                if a.immersion_buckets.unwrap_or(4) > steps {
                    errs.push("analysis.immersion_buckets exceeds engine.n_steps".into());
                }
            }
            Scenario::Factorization(f) => {
                let independent = matches!(f.mode, FactorizationMode::IndependentDrivers { .. });
                for x in &a.run {
                    let fits = match x {
                        Analysis::OrthogonalProduct => independent,
                        Analysis::RegimeSwitch => !independent,
                        _ => true,
                    };
                    if !fits {
                        errs.push(format!(
                            "analysis.run: '{}' does not apply to factorization mode {}",
                            x.name(),
                            if independent { "independent_drivers" } else { "regime_switch" }
                        ));
                    }
                }
            }
        }
        errs
    }

    pub fn validate(&self) -> CliResult<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(errs))
        }
    }

    /// Study plan of the honest-time scenario.
    pub fn honest_plan(&self, grid: &TimeGrid) -> CliResult<StudyPlan> {
        let Scenario::HonestTime(h) = self.scenario() else {
            return Err(CliError::Validation(vec!["not an honest-time config".into()]));
        };
        let mut plan = StudyPlan::standard(grid, h.horizon)?;
        let a = &self.analysis;
        if let Some(c) = &a.c_grid {
            plan.c_grid = c.clone();
        }
        if let Some(d) = &a.delta_list {
            plan.deltas = d.clone();
        }
        if let Some(c) = &a.checkpoints {
            plan.checkpoints = c
                .iter()
                .map(|&t| grid.index_at(t))
                .collect::<insiderlab::Result<_>>()?;
        }
        if let Some(f) = &a.floors {
            plan.floors = f.clone();
        }
        if let Some(s) = &a.strategies {
            plan.long_only = s.clone();
        }
        if let Some(b) = a.increment_buckets {
            plan.increment_buckets = b;
        }
        if let Some(o) = a.increment_offset {
            plan.increment_offset = o;
        }
        if !self.analyses().contains(&Analysis::IncrementTest) {
            plan.increment_buckets = 0;
        }
        Ok(plan)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.engine.seed = s;
        }
        if let Some(p) = o.paths {
            self.engine.n_paths = p;
        }
        if let Some(s) = o.steps {
            self.engine.n_steps = s;
        }
        if let Some(d) = &o.out {
            self.output.directory = d.clone();
        }
        if let Some(t) = o.threads {
            self.engine.threads = Some(t);
        }
        if let Some(f) = o.format {
            self.output.formats = vec![f];
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn block<T: DeserializeOwned>(name: &str, v: &Value, errs: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value::<T>(v.clone()) {
        Ok(b) => Some(b),
        Err(e) => {
            errs.push(format!("{name}: {e}"));
            None
        }
    }
}

/// Parses and validates a JSON config, reporting every error found.
pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| CliError::Validation(vec![format!("config is not valid JSON: {e}")]))?;
    let Some(obj) = root.as_object() else {
        return Err(CliError::Validation(vec!["config must be a JSON object".into()]));
    };
    let mut errs = Vec::new();
    for key in obj.keys() {
        if !["scenario", "engine", "analysis", "output"].contains(&key.as_str()) {
            errs.push(format!(
                "unknown top-level key '{key}', expected scenario | engine | analysis | output"
            ));
        }
    }
    let scenario = match obj.get("scenario") {
        None => {
            errs.push("missing block 'scenario'".into());
            None
        }
        Some(v) => parse_scenario(v, &mut errs),
    };
    let engine = match obj.get("engine") {
        None => {
            errs.push("missing block 'engine'".into());
            None
        }
        Some(v) => block::<EngineBlock>("engine", v, &mut errs),
    };
    let analysis = obj
        .get("analysis")
        .map_or(Some(AnalysisBlock::default()), |v| {
            block::<AnalysisBlock>("analysis", v, &mut errs)
        });
    let output = obj
        .get("output")
        .map_or(Some(OutputBlock::default()), |v| {
            block::<OutputBlock>("output", v, &mut errs)
        });
    match (scenario, engine, analysis, output) {
        (Some(scenario), Some(engine), Some(analysis), Some(output)) if errs.is_empty() => {
            let cfg = RunConfig {
                scenario,
                engine,
                analysis,
                output,
            };
            cfg.validate()?;
            Ok(cfg)
        }
        (scenario, engine, ..) => {
            if let Some(s) = scenario {
                errs.extend(s.validation_errors());
            }
            if let Some(e) = engine {
                errs.extend(e.validation_errors());
            }
            Err(CliError::Validation(errs))
        }
    }
}

fn parse_scenario(v: &Value, errs: &mut Vec<String>) -> Option<ScenarioBlock> {
    let Some(obj) = v.as_object() else {
        errs.push("scenario must be an object".into());
        return None;
    };
    let known = ["honest_time", "density_lab", "factorization"];
    let mut ok = true;
    for key in obj.keys() {
        if !known.contains(&key.as_str()) {
            errs.push(format!(
                "scenario: unknown block '{key}', expected honest_time | density_lab | factorization"
            ));
            ok = false;
        }
    }
    let present = known.iter().filter(|k| obj.contains_key(**k)).count();
    if present != 1 {
        errs.push(format!(
            "scenario: exactly one block of honest_time | density_lab | factorization is required, found {present}"
        ));
        ok = false;
    }
    let mut out = ScenarioBlock::default();
    if let Some(b) = obj.get("honest_time") {
        out.honest_time = block("scenario.honest_time", b, errs);
        ok &= out.honest_time.is_some();
    }
    if let Some(b) = obj.get("density_lab") {
        out.density_lab = block("scenario.density_lab", b, errs);
        ok &= out.density_lab.is_some();
    }
    if let Some(b) = obj.get("factorization") {
        out.factorization = block("scenario.factorization", b, errs);
        ok &= out.factorization.is_some();
    }
    ok.then_some(out)
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text)
}
