//! Self-financing strategies in one risky asset with a constant risk-free
//! price, long-only enforcement and arbitrage audits.
//!
//! A strategy holds `φ_i` units of `X` over `[t_i, t_{i+1})`, chosen from the
//! path up to `t_i` (and, for insider rules, the honest time). Wealth follows
//! `V_{i+1} = V_i + φ_i (X_{i+1} - X_i)` and trading stops at the horizon
//! node `end`.

use serde::{Deserialize, Serialize};

use crate::engine::ProcessTrack;
use crate::error::{LabError, Result};
use crate::measures::{weighted_expectation, WeightedEstimate};
use crate::stats::{Estimate, Frequency};

/// Pathwise tolerance for "wealth never below the initial endowment".
pub const ARBITRAGE_TOLERANCE: f64 = 1e-12;

/// Built-in position rules. Insider rules read the honest time `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PositionRule {
    Flat,
    Constant { units: f64 },
    BuyAndHold,
    /// Short one unit from `g` to the horizon.
    ShortAfterHonestTime,
    /// Buy one unit at `g` and hold to the horizon.
    LongAfterHonestTime,
    /// Hold one unit until `g`.
    LongUntilHonestTime,
    /// Hold one unit while the drawdown `(S - X)/S` is at least `theta`.
    DrawdownThreshold { theta: f64 },
    /// Hold one unit after `g` while the drawdown is at least `theta`.
    InsiderDrawdownThreshold { theta: f64 },
}

impl PositionRule {
    pub fn uses_honest_time(&self) -> bool {
        matches!(
            self,
            PositionRule::ShortAfterHonestTime
                | PositionRule::LongAfterHonestTime
                | PositionRule::LongUntilHonestTime
                | PositionRule::InsiderDrawdownThreshold { .. }
        )
    }

    /// True when the rule can never hold a negative position.
    pub fn is_long_only(&self) -> bool {
        match self {
            PositionRule::Constant { units } => *units >= 0.0,
            PositionRule::ShortAfterHonestTime => false,
            _ => true,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            PositionRule::Constant { units } if !units.is_finite() => {
                Err(LabError::config("constant position must be finite"))
            }
            PositionRule::DrawdownThreshold { theta }
            | PositionRule::InsiderDrawdownThreshold { theta }
                if !(0.0..1.0).contains(theta) =>
            {
                Err(LabError::config(format!(
                    "drawdown threshold theta must lie in [0,1), got {theta}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Position over `[t_i, t_{i+1})`.
    pub fn position(&self, ctx: &PathContext<'_>, i: usize) -> f64 {
        let after_g = ctx.g.is_some_and(|g| i >= g);
        let drawdown = |i: usize| {
            let s = ctx.running_max[i];
            (s - ctx.x[i]) / s
        };
        match *self {
            PositionRule::Flat => 0.0,
            PositionRule::Constant { units } => units,
            PositionRule::BuyAndHold => 1.0,
            PositionRule::ShortAfterHonestTime => {
                if after_g {
                    -1.0
                } else {
                    0.0
                }
            }
            PositionRule::LongAfterHonestTime => f64::from(u8::from(after_g)),
            PositionRule::LongUntilHonestTime => f64::from(u8::from(!after_g)),
            PositionRule::DrawdownThreshold { theta } => {
                f64::from(u8::from(drawdown(i) >= theta && drawdown(i) > 0.0))
            }
            PositionRule::InsiderDrawdownThreshold { theta } => {
                f64::from(u8::from(after_g && drawdown(i) >= theta))
            }
        }
    }
}

/// A named strategy: `units` times the rule's position, starting from `initial_wealth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub name: String,
    pub rule: PositionRule,
    #[serde(default = "one")]
    pub units: f64,
    #[serde(default)]
    pub long_only: bool,
    #[serde(default)]
    pub initial_wealth: f64,
}

fn one() -> f64 {
    1.0
}

impl StrategySpec {
    pub fn new(name: impl Into<String>, rule: PositionRule) -> Self {
        StrategySpec {
            name: name.into(),
            rule,
            units: 1.0,
            long_only: false,
            initial_wealth: 0.0,
        }
    }

    pub fn long_only(mut self) -> Self {
        self.long_only = true;
        self
    }

    pub fn with_units(mut self, units: f64) -> Self {
        self.units = units;
        self
    }

    pub fn with_initial_wealth(mut self, v0: f64) -> Self {
        self.initial_wealth = v0;
        self
    }

    /// Static checks; a long-only spec whose rule can short is rejected
    /// before any path is evaluated.
    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if !self.units.is_finite() || !self.initial_wealth.is_finite() {
            return Err(LabError::config(format!(
                "strategy '{}': units and initial wealth must be finite",
                self.name
            )));
        }
        if self.long_only && (self.units < 0.0 || !self.rule.is_long_only()) {
            return Err(LabError::LongOnlyViolation {
                strategy: self.name.clone(),
                position: -self.units.abs().max(1.0),
                path: 0,
                node: 0,
            });
        }
        Ok(())
    }

    pub fn position(&self, ctx: &PathContext<'_>, i: usize) -> f64 {
        self.units * self.rule.position(ctx, i)
    }

    /// Terminal gain `V_end - v₀` on one path.
    pub fn path_gain(&self, ctx: &PathContext<'_>, path: usize) -> Result<f64> {
        let mut gain = 0.0;
        for i in 0..ctx.end {
            let phi = self.position(ctx, i);
            if self.long_only && phi < 0.0 {
                return Err(LabError::LongOnlyViolation {
                    strategy: self.name.clone(),
                    position: phi,
                    path,
                    node: i,
                });
            }
            gain += phi * (ctx.x[i + 1] - ctx.x[i]);
        }
        Ok(gain)
    }
}

/// What a position rule may read on one path.
#[derive(Debug, Clone, Copy)]
pub struct PathContext<'a> {
    pub x: &'a [f64],
    pub running_max: &'a [f64],
    /// Grid node of the honest time, `None` when it lies beyond the simulation.
    pub g: Option<usize>,
    /// Last node at which the position is liquidated.
    pub end: usize,
}

/// Inputs of [`run_strategy`]: price track plus the optional insider information.
#[derive(Debug, Clone, Copy)]
pub struct MarketData<'a> {
    pub x: &'a ProcessTrack,
    pub running_max: Option<&'a ProcessTrack>,
    pub honest_time: Option<&'a [Option<usize>]>,
    pub end: usize,
}

impl<'a> MarketData<'a> {
    pub fn new(x: &'a ProcessTrack) -> Self {
        MarketData {
            x,
            running_max: None,
            honest_time: None,
            end: x.n_nodes() - 1,
        }
    }

    fn context(&self, p: usize, scratch: &'a [f64]) -> PathContext<'a> {
        PathContext {
            x: self.x.row(p),
            running_max: self.running_max.map_or(scratch, |s| s.row(p)),
            g: self.honest_time.and_then(|g| g[p]),
            end: self.end,
        }
    }
}

fn running_max_of(row: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    row.iter()
        .map(|&v| {
            m = m.max(v);
            m
        })
        .collect()
}

/// Wealth track `V` of a strategy; constant after `end`.
pub fn run_strategy(spec: &StrategySpec, market: &MarketData<'_>) -> Result<ProcessTrack> {
    spec.validate()?;
    let x = market.x;
    if market.end >= x.n_nodes() {
        return Err(LabError::config("strategy horizon lies beyond the price track"));
    }
    if spec.rule.uses_honest_time() && market.honest_time.is_none() {
        return Err(LabError::config(format!(
            "strategy '{}' needs the honest time",
            spec.name
        )));
    }
    if let Some(g) = market.honest_time {
        if g.len() != x.n_paths() {
            return Err(LabError::config("honest times do not match the price paths"));
        }
    }
    if let Some(s) = market.running_max {
        x.same_shape(s)?;
    }
    let mut v = ProcessTrack::constant(
        format!("V[{}]", spec.name),
        x.n_paths(),
        x.n_nodes(),
        spec.initial_wealth,
    );
    for p in 0..x.n_paths() {
        let scratch = if market.running_max.is_none() {
            running_max_of(x.row(p))
        } else {
            Vec::new()
        };
        let ctx = market.context(p, &scratch);
        let row = v.row_mut(p);
        for i in 0..ctx.end {
            let phi = spec.position(&ctx, i);
            if spec.long_only && phi < 0.0 {
                return Err(LabError::LongOnlyViolation {
                    strategy: spec.name.clone(),
                    position: phi,
                    path: p,
                    node: i,
                });
            }
            row[i + 1] = row[i] + phi * (ctx.x[i + 1] - ctx.x[i]);
        }
        let last = row[ctx.end];
        row[ctx.end..].fill(last);
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageReport {
    pub strategy: String,
    pub initial_wealth: f64,
    /// Statistics of the gain `V_T - v₀`.
    pub min_gain: f64,
    pub max_gain: f64,
    pub mean_gain: Estimate,
    pub fraction_positive: Frequency,
    pub tolerance: f64,
    /// `min_gain >= -tolerance` and `mean_gain > 3 SE`.
    pub arbitrage_evidence: bool,
}

impl ArbitrageReport {
    pub fn from_gains(strategy: &str, initial_wealth: f64, gains: &[f64]) -> Result<Self> {
        if gains.is_empty() {
            return Err(LabError::InsufficientData(format!(
                "no paths for strategy '{strategy}'"
            )));
        }
        let min_gain = gains.iter().copied().fold(f64::INFINITY, f64::min);
        let max_gain = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean_gain = Estimate::from_samples(gains);
        let positive = gains.iter().filter(|&&v| v > 0.0).count();
        let evidence =
            min_gain >= -ARBITRAGE_TOLERANCE && mean_gain.mean > 3.0 * mean_gain.std_error;
        Ok(ArbitrageReport {
            strategy: strategy.to_string(),
            initial_wealth,
            min_gain,
            max_gain,
            mean_gain,
            fraction_positive: Frequency::new(positive, gains.len()),
            tolerance: ARBITRAGE_TOLERANCE,
            arbitrage_evidence: evidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongOnlyReport {
    pub report: ArbitrageReport,
    /// `E^{Q^S}[V_T]`.
    pub qs_terminal_wealth: WeightedEstimate,
    /// `E^{Q^S}[V_T] <= v₀ + 3 SE`.
    pub supermartingale_bound_holds: bool,
    /// No arbitrage evidence and the supermartingale bound holds.
    pub passed: bool,
}

impl LongOnlyReport {
    pub fn from_gains(spec: &StrategySpec, gains: &[f64], qs_density: &[f64]) -> Result<Self> {
        let report = ArbitrageReport::from_gains(&spec.name, spec.initial_wealth, gains)?;
        let wealth: Vec<f64> = gains.iter().map(|g| spec.initial_wealth + g).collect();
        let qs = weighted_expectation(&wealth, qs_density)?;
        let bound = qs.estimate.mean <= spec.initial_wealth + 3.0 * qs.estimate.std_error;
        Ok(LongOnlyReport {
            passed: bound && !report.arbitrage_evidence,
            supermartingale_bound_holds: bound,
            report,
            qs_terminal_wealth: qs,
        })
    }
}

/// The long-only candidates audited by default.
pub fn default_long_only_set() -> Vec<StrategySpec> {
    vec![
        StrategySpec::new("buy_and_hold", PositionRule::BuyAndHold).long_only(),
        StrategySpec::new("buy_at_g_hold_to_t", PositionRule::LongAfterHonestTime).long_only(),
        StrategySpec::new("long_until_g", PositionRule::LongUntilHonestTime).long_only(),
        StrategySpec::new("drawdown_10pct", PositionRule::DrawdownThreshold { theta: 0.1 })
            .long_only(),
        StrategySpec::new("drawdown_25pct", PositionRule::DrawdownThreshold { theta: 0.25 })
            .long_only(),
        StrategySpec::new(
            "insider_drawdown_10pct",
            PositionRule::InsiderDrawdownThreshold { theta: 0.1 },
        )
        .long_only(),
        StrategySpec::new("flat", PositionRule::Flat).long_only(),
    ]
}

pub fn insider_short_spec() -> StrategySpec {
    StrategySpec::new("short_after_g", PositionRule::ShortAfterHonestTime)
}

/// Terminal gains of a strategy on every path of a market.
pub fn terminal_gains(spec: &StrategySpec, market: &MarketData<'_>) -> Result<Vec<f64>> {
    let v = run_strategy(spec, market)?;
    Ok((0..v.n_paths())
        .map(|p| v.get(p, market.end) - spec.initial_wealth)
        .collect())
}

/// Arbitrage audit of the insider's short sale at the honest time.
pub fn insider_short_audit(market: &MarketData<'_>) -> Result<ArbitrageReport> {
    let spec = insider_short_spec();
    let gains = terminal_gains(&spec, market)?;
    ArbitrageReport::from_gains(&spec.name, spec.initial_wealth, &gains)
}

/// Audits long-only strategies under `P` (arbitrage flag) and under `Q^S`
/// (supermartingale bound on terminal wealth).
pub fn long_only_audit(
    specs: &[StrategySpec],
    market: &MarketData<'_>,
    qs_density: &[f64],
) -> Result<Vec<LongOnlyReport>> {
    specs
        .iter()
        .map(|spec| {
            if !spec.long_only {
                return Err(LabError::config(format!(
                    "strategy '{}' is not marked long-only",
                    spec.name
                )));
            }
            let gains = terminal_gains(spec, market)?;
            LongOnlyReport::from_gains(spec, &gains, qs_density)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prices() -> ProcessTrack {
        ProcessTrack::from_rows(
            "X",
            &[
                vec![1.0, 1.2, 1.5, 1.1, 0.9],
                vec![1.0, 0.8, 0.7, 0.9, 1.3],
            ],
        )
        .unwrap()
    }

    #[test]
    fn flat_keeps_wealth() {
        let x = prices();
        let spec = StrategySpec::new("flat", PositionRule::Flat).with_initial_wealth(2.5);
        let v = run_strategy(&spec, &MarketData::new(&x)).unwrap();
        assert!(v.values().iter().all(|&w| w == 2.5));
    }

    #[test]
    fn buy_and_hold_telescopes() {
        let x = prices();
        let spec = StrategySpec::new("bh", PositionRule::BuyAndHold).with_initial_wealth(1.0);
        let v = run_strategy(&spec, &MarketData::new(&x)).unwrap();
        assert_eq!(v.terminal(), x.terminal());
    }

    #[test]
    fn short_after_g_pays_the_drop() {
        let x = prices();
        let g = [Some(2), None];
        let market = MarketData {
            honest_time: Some(&g),
            ..MarketData::new(&x)
        };
        let gains = terminal_gains(&insider_short_spec(), &market).unwrap();
        assert!((gains[0] - (1.5 - 0.9)).abs() < 1e-15);
        assert_eq!(gains[1], 0.0);
    }

    #[test]
    fn horizon_stops_trading() {
        let x = prices();
        let market = MarketData {
            end: 2,
            ..MarketData::new(&x)
        };
        let v = run_strategy(&StrategySpec::new("bh", PositionRule::BuyAndHold), &market).unwrap();
        assert_eq!(v.row(0)[2..], [0.5, 0.5, 0.5]);
    }

    #[test]
    fn long_only_rejects_short_rules() {
        let spec = insider_short_spec().long_only();
        assert!(matches!(
            spec.validate(),
            Err(LabError::LongOnlyViolation { .. })
        ));
        let neg = StrategySpec::new("neg", PositionRule::Constant { units: -1.0 }).long_only();
        assert!(neg.validate().is_err());
        let x = prices();
        assert!(run_strategy(&neg, &MarketData::new(&x)).is_err());
    }

    #[test]
    fn insider_rules_need_g() {
        let x = prices();
        let r = run_strategy(
            &StrategySpec::new("l", PositionRule::LongAfterHonestTime),
            &MarketData::new(&x),
        );
        assert!(r.is_err());
    }

    #[test]
    fn drawdown_rule_buys_dips() {
        let x = prices();
        let spec = StrategySpec::new("dd", PositionRule::DrawdownThreshold { theta: 0.15 });
        let v = run_strategy(&spec, &MarketData::new(&x)).unwrap();
        // path 1: drawdown 0.2 at node 1, 0.3 at node 2, 0.1 at node 3
        assert!((v.get(1, 4) - 0.1).abs() < 1e-12);
        // path 0: drawdown 0.2667 at node 3 only
        assert!((v.get(0, 4) - (0.9 - 1.1)).abs() < 1e-12);
    }

    #[test]
    fn arbitrage_flag_needs_both_conditions() {
        let gains: Vec<f64> = (0..50).map(|i| (i % 3) as f64).collect();
        let ok = ArbitrageReport::from_gains("s", 0.0, &gains).unwrap();
        assert!(ok.arbitrage_evidence);
        let neg = ArbitrageReport::from_gains("s", 0.0, &[-0.1, 1.0, 2.0, 1.0]).unwrap();
        assert!(!neg.arbitrage_evidence);
        let zero = ArbitrageReport::from_gains("s", 0.0, &[0.0; 4]).unwrap();
        assert!(!zero.arbitrage_evidence);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = StrategySpec::new("dd", PositionRule::DrawdownThreshold { theta: 0.25 })
            .long_only()
            .with_units(2.0);
        let s = serde_json::to_string(&spec).unwrap();
        let back: StrategySpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
    }
}
