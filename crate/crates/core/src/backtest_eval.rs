//! Backtests of trained policies and baseline strategies, the four
//! performance metrics, report files and the ablation harness.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::{prepare_split, FeatureNormalizer, FeaturePanel, IndicatorConfig, IndicatorError};
use crate::market_data::{inject_outliers, DataError, PanelData};
use crate::migt_policy::{AttentionConfig, PolicyConfig, PolicyError, PolicyParameters, Variant};
use crate::portfolio_env::{AccountSnapshot, EnvConfig, EnvError, PortfolioEnv};
use crate::ppo_trainer::{empty_memory, greedy_step, train_from, PpoConfig, TrainError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("strategy expects {expected} assets, panel has {got}")]
    AssetMismatch { expected: usize, got: usize },
    #[error("invalid equity curve: {0}")]
    Curve(String),
    #[error("invalid metrics config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Indicator(#[from] IndicatorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub risk_free_annual: f64,
    /// Minimum acceptable annual return for the Sortino ratio.
    pub min_acceptable_annual: f64,
    pub omega_threshold_annual: f64,
    pub trading_days: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            risk_free_annual: 0.03,
            min_acceptable_annual: 0.03,
            omega_threshold_annual: 0.03,
            trading_days: 252,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (field, v) in [
            ("risk_free_annual", self.risk_free_annual),
            ("min_acceptable_annual", self.min_acceptable_annual),
            ("omega_threshold_annual", self.omega_threshold_annual),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EvalError::Config(format!("{field} must be >= 0, got {v}")));
            }
        }
        if self.trading_days == 0 {
            return Err(EvalError::Config("trading_days must be >= 1".into()));
        }
        Ok(())
    }

    fn daily(&self, annual: f64) -> f64 {
        daily_rate(annual, self.trading_days)
    }

    fn annualizer(&self) -> f64 {
        (self.trading_days as f64).sqrt()
    }
}

/// Geometric conversion of an annual rate to a per-day rate.
pub fn daily_rate(annual: f64, trading_days: usize) -> f64 {
    (1.0 + annual).powf(1.0 / trading_days as f64) - 1.0
}

/// Daily portfolio values of one run, starting with `P_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct EquityCurve {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl EquityCurve {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self, EvalError> {
        if values.is_empty() || dates.len() != values.len() {
            return Err(EvalError::Curve(format!(
                "need matching non-empty dates and values, got {} and {}",
                dates.len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(EvalError::Curve(format!("portfolio values must be > 0, found {v}")));
        }
        Ok(EquityCurve { dates, values })
    }

    /// `P_t / P_{t−1} − 1`.
    pub fn returns(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
    }

    /// `P_t / P_0`.
    pub fn value_ratios(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / self.values[0]).collect()
    }
}

/// A metric that may be degenerate for the given returns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricValue {
    Value(f64),
    /// Too few returns or zero variance.
    Undefined,
    /// No return fell below the threshold.
    NoDownside,
    /// No return fell below the threshold, so there is no loss mass.
    NoLoss,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Value(v) => write!(f, "{v}"),
            MetricValue::Undefined => f.write_str("undefined"),
            MetricValue::NoDownside => f.write_str("no_downside"),
            MetricValue::NoLoss => f.write_str("no_loss"),
        }
    }
}

/// Standard deviations below this are treated as zero variance.
const ZERO_STD: f64 = 1e-12;

/// `(P_T − P_0) / P_0`.
pub fn cumulative_return(curve: &EquityCurve) -> f64 {
    let (first, last) = (curve.values[0], curve.values[curve.values.len() - 1]);
    (last - first) / first
}

/// Annualized Sharpe ratio: mean daily excess return over the sample
/// standard deviation of daily returns, times `√trading_days`.
pub fn sharpe_ratio(curve: &EquityCurve, config: &MetricsConfig) -> MetricValue {
    let r = curve.returns();
    if r.len() < 2 {
        return MetricValue::Undefined;
    }
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if std < ZERO_STD {
        return MetricValue::Undefined;
    }
    MetricValue::Value((mean - config.daily(config.risk_free_annual)) / std * config.annualizer())
}

/// Annualized Sortino ratio with the downside deviation
/// `√((1/T) Σ_{R_t < r} (R_t − r)²)`.
pub fn sortino_ratio(curve: &EquityCurve, config: &MetricsConfig) -> MetricValue {
    let r = curve.returns();
    if r.len() < 2 {
        return MetricValue::Undefined;
    }
    let mar = config.daily(config.min_acceptable_annual);
    let n = r.len() as f64;
    let mean_excess = r.iter().map(|x| x - mar).sum::<f64>() / n;
    let downside: f64 = r.iter().filter(|&&x| x < mar).map(|x| (x - mar).powi(2)).sum();
    if downside == 0.0 {
        return MetricValue::NoDownside;
    }
    MetricValue::Value(mean_excess / (downside / n).sqrt() * config.annualizer())
}

/// Omega ratio from the empirical distribution: gains above the threshold
/// over losses below it.
pub fn omega_ratio(curve: &EquityCurve, config: &MetricsConfig) -> MetricValue {
    omega_at(&curve.returns(), config.daily(config.omega_threshold_annual))
}

/// Omega ratio of `returns` at per-period threshold `tau`.
pub fn omega_at(returns: &[f64], tau: f64) -> MetricValue {
    if returns.is_empty() {
        return MetricValue::Undefined;
    }
    let gains: f64 = returns.iter().map(|r| (r - tau).max(0.0)).sum();
    let losses: f64 = returns.iter().map(|r| (tau - r).max(0.0)).sum();
    if losses == 0.0 {
        MetricValue::NoLoss
    } else {
        MetricValue::Value(gains / losses)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub cum_return: f64,
    pub sharpe: MetricValue,
    pub omega: MetricValue,
    pub sortino: MetricValue,
}

pub fn compute_metrics(curve: &EquityCurve, config: &MetricsConfig) -> Metrics {
    Metrics {
        cum_return: cumulative_return(curve),
        sharpe: sharpe_ratio(curve, config),
        omega: omega_ratio(curve, config),
        sortino: sortino_ratio(curve, config),
    }
}

/// Baseline allocation rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Everything in the asset with the best previous-day return.
    Best,
    EqualWeight,
    BuyAndHold,
    AllCash,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Best,
        BaselineKind::EqualWeight,
        BaselineKind::BuyAndHold,
        BaselineKind::AllCash,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Best => "best",
            BaselineKind::EqualWeight => "equal_weight",
            BaselineKind::BuyAndHold => "buy_and_hold",
            BaselineKind::AllCash => "all_cash",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown baseline {s:?}"))
    }
}

/// One-hot allocation on the asset with the highest return from day `t − 1`
/// to day `t`; ties go to the lowest index. All cash on day 0.
pub fn best_baseline(prices: &[Vec<f64>], t: usize) -> Vec<f64> {
    let n = prices[0].len();
    let mut out = vec![0.0; n + 1];
    if t == 0 {
        out[n] = 1.0;
        return out;
    }
    let mut best = 0;
    let mut best_ret = f64::NEG_INFINITY;
    for k in 0..n {
        let r = prices[t][k] / prices[t - 1][k] - 1.0;
        if r > best_ret {
            best = k;
            best_ret = r;
        }
    }
    out[best] = 1.0;
    out
}

/// Allocation for a control baseline given the allocation currently held.
/// `first` marks the first decision of the episode.
///
/// # Panics
///
/// For [`BaselineKind::Best`], which depends on prices.
pub fn control_baseline(kind: BaselineKind, current: &[f64], first: bool) -> Vec<f64> {
    let n = current.len() - 1;
    let equal = || {
        let mut a = vec![1.0 / n as f64; n + 1];
        a[n] = 0.0;
        a
    };
    match kind {
        BaselineKind::EqualWeight => equal(),
        BaselineKind::BuyAndHold if first => equal(),
        BaselineKind::BuyAndHold => current.to_vec(),
        BaselineKind::AllCash => {
            let mut a = vec![0.0; n + 1];
            a[n] = 1.0;
            a
        }
        BaselineKind::Best => panic!("best baseline needs prices; use best_baseline"),
    }
}

/// What drives a backtest.
#[derive(Clone, Debug)]
pub enum Strategy {
    Policy {
        params: Box<PolicyParameters>,
        config: PolicyConfig,
    },
    Baseline(BaselineKind),
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Policy { config, .. } => format!("migt_{}", config.variant.name()),
            Strategy::Baseline(k) => k.name().to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BacktestResult {
    pub curve: EquityCurve,
    pub snapshots: Vec<AccountSnapshot>,
    /// Tickers followed by `cash`, matching each snapshot's weight vector.
    pub columns: Vec<String>,
}

/// Runs `strategy` greedily from `first_step` (default: first post-warm-up
/// step) to the end of `panel`.
pub fn run_backtest(
    strategy: &Strategy,
    panel: Arc<FeaturePanel>,
    env_config: &EnvConfig,
    first_step: Option<usize>,
) -> Result<BacktestResult, EvalError> {
    if let Strategy::Policy { params, config } = strategy {
        if config.n_assets != panel.n_assets() {
            return Err(EvalError::AssetMismatch {
                expected: config.n_assets,
                got: panel.n_assets(),
            });
        }
        params.check_layout(config)?;
    }
    let first = first_step.unwrap_or(panel.warmup + env_config.window);
    let (mut env, mut state) = PortfolioEnv::reset_at(panel.clone(), env_config.clone(), first)?;
    let mut memory = match strategy {
        Strategy::Policy { config, .. } => Some(empty_memory(config)),
        Strategy::Baseline(_) => None,
    };
    let mut dates = vec![panel.dates[first - 1]];
    let mut values = vec![env.portfolio_value()];
    let mut snapshots = Vec::with_capacity(env.episode_len());
    let mut step = 0;
    while !env.is_done() {
        let action = match strategy {
            Strategy::Policy { params, config } => {
                let (a, next) = greedy_step(params, config, &state, memory.as_ref().expect("policy memory"))?;
                memory = Some(next);
                a
            }
            Strategy::Baseline(BaselineKind::Best) => best_baseline(&panel.prices, env.current_step() - 1),
            Strategy::Baseline(kind) => control_baseline(*kind, &env.current_allocation(), step == 0),
        };
        let outcome = env.step(&action)?;
        dates.push(outcome.info.date);
        values.push(outcome.info.portfolio_value);
        snapshots.push(outcome.info);
        state = outcome.state;
        step += 1;
    }
    let mut columns = panel.tickers.clone();
    columns.push("cash".into());
    Ok(BacktestResult {
        curve: EquityCurve::new(dates, values)?,
        snapshots,
        columns,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub strategy: String,
    pub dataset: String,
    pub metrics: Metrics,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("strategy,dataset,cum_return,sharpe,omega,sortino\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strategy, r.dataset, m.cum_return, m.sharpe, m.omega, m.sortino
        ));
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<(), EvalError> {
    write_text(path.as_ref(), &metrics_csv(rows))
}

pub fn equity_csv(curve: &EquityCurve) -> String {
    let mut out = String::from("date,value_ratio\n");
    for (d, r) in curve.dates.iter().zip(curve.value_ratios()) {
        out.push_str(&format!("{d},{r}\n"));
    }
    out
}

pub fn write_equity_csv(path: impl AsRef<Path>, curve: &EquityCurve) -> Result<(), EvalError> {
    write_text(path.as_ref(), &equity_csv(curve))
}

/// Long-format weight log: one row per day and column.
pub fn weights_csv(result: &BacktestResult) -> String {
    let mut out = String::from("date,ticker,weight\n");
    for s in &result.snapshots {
        for (name, w) in result.columns.iter().zip(&s.weights) {
            out.push_str(&format!("{},{name},{w}\n", s.date));
        }
    }
    out
}

pub fn write_weights_csv(path: impl AsRef<Path>, result: &BacktestResult) -> Result<(), EvalError> {
    write_text(path.as_ref(), &weights_csv(result))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line plot of value-ratio series sharing one date axis.
pub fn svg_line_plot(title: &str, dates: &[NaiveDate], series: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (800.0, 420.0, 50.0);
    let all = series.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let n = dates.len().max(2) - 1;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"25\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        escape(title),
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for (v, anchor) in [(lo, h - pad), (hi, pad)] {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{anchor}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>\n",
            pad - 4.0
        ));
    }
    if let (Some(first), Some(last)) = (dates.first(), dates.last()) {
        out.push_str(&format!(
            "<text x=\"{pad}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{first}</text>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{last}</text>\n",
            h - pad + 16.0,
            w - pad,
            h - pad + 16.0
        ));
    }
    for (i, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(j, v)| format!("{:.2},{:.2}", x(j), y(*v)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            points.join(" "),
            w - pad - 150.0,
            pad + 16.0 * (i as f64 + 1.0),
            escape(name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Arms of an ablation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub outlier_fractions: Vec<f64>,
    pub outlier_factors: Vec<f64>,
    /// Evaluate the greedy policy on the test period every this many updates.
    pub eval_every: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0],
            outlier_fractions: vec![0.0],
            outlier_factors: crate::market_data::DEFAULT_OUTLIER_FACTORS.to_vec(),
            eval_every: 1,
        }
    }
}

/// Everything one ablation arm trains and evaluates with.
#[derive(Clone, Debug)]
pub struct ArmSetup<'a> {
    pub train: &'a PanelData,
    pub test: &'a PanelData,
    pub indicators: &'a IndicatorConfig,
    pub env: &'a EnvConfig,
    pub attention: &'a AttentionConfig,
    pub ppo: &'a PpoConfig,
    pub metrics: &'a MetricsConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArmStatus {
    Ok,
    Diverged(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub outlier_fraction: f64,
    pub status: ArmStatus,
    /// Test-period metrics of the final parameters; `None` when the arm diverged.
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergencePoint {
    pub variant: Variant,
    pub seed: u64,
    pub outlier_fraction: f64,
    pub step: usize,
    pub cum_return: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub convergence: Vec<ConvergencePoint>,
}

impl AblationReport {
    pub fn table_csv(&self) -> String {
        let mut out = String::from("variant,seed,outlier_fraction,status,cum_return,sharpe,omega,sortino\n");
        for r in &self.rows {
            let status = match &r.status {
                ArmStatus::Ok => "ok",
                ArmStatus::Diverged(_) => "diverged",
            };
            let metrics = match &r.metrics {
                Some(m) => format!("{},{},{},{}", m.cum_return, m.sharpe, m.omega, m.sortino),
                None => ",,,".into(),
            };
            out.push_str(&format!(
                "{},{},{},{status},{metrics}\n",
                r.variant.name(),
                r.seed,
                r.outlier_fraction
            ));
        }
        out
    }

    pub fn convergence_csv(&self) -> String {
        let mut out = String::from("variant,seed,outlier_fraction,step,cum_return\n");
        for p in &self.convergence {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.variant.name(),
                p.seed,
                p.outlier_fraction,
                p.step,
                p.cum_return
            ));
        }
        out
    }

    pub fn succeeded(&self) -> usize {
        self.rows.iter().filter(|r| r.status == ArmStatus::Ok).count()
    }
}

/// Result of training and evaluating one arm.
#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub row: AblationRow,
    pub convergence: Vec<ConvergencePoint>,
    pub params: PolicyParameters,
    /// Statistics fitted on the arm's (possibly perturbed) training panel.
    pub normalizer: FeatureNormalizer,
}

/// Trains one variant on `setup.train` (with outliers injected at
/// `fraction`) and evaluates it greedily on the test period.
pub fn run_arm(setup: &ArmSetup, variant: Variant, seed: u64, fraction: f64, factors: &[f64], eval_every: usize) -> Result<ArmOutcome, EvalError> {
    let train_raw = if fraction > 0.0 {
        inject_outliers(setup.train, fraction, factors, seed)?
    } else {
        setup.train.clone()
    };
    let split = prepare_split(&train_raw, setup.train, setup.test, setup.indicators)?;
    let train_panel = Arc::new(split.train);
    let test_panel = Arc::new(split.test);
    let policy = PolicyConfig {
        n_assets: train_panel.n_assets(),
        channels: train_panel.n_features() + 2,
        attention: setup.attention.clone(),
        variant,
    };
    let ppo = PpoConfig { seed, ..setup.ppo.clone() };
    let evaluate = |params: &PolicyParameters| -> Result<Metrics, EvalError> {
        let strategy = Strategy::Policy {
            params: Box::new(params.clone()),
            config: policy.clone(),
        };
        let result = run_backtest(&strategy, test_panel.clone(), setup.env, Some(split.test_start))?;
        Ok(compute_metrics(&result.curve, setup.metrics))
    };
    let mut convergence = Vec::new();
    let mut eval_error = None;
    let init = PolicyParameters::init(&policy, seed)?;
    let trained = train_from(train_panel, setup.env, &policy, &ppo, init, |p| {
        if eval_every > 0 && p.update % eval_every == 0 && eval_error.is_none() {
            match evaluate(p.params) {
                Ok(m) => convergence.push(ConvergencePoint {
                    variant,
                    seed,
                    outlier_fraction: fraction,
                    step: p.steps,
                    cum_return: m.cum_return,
                }),
                Err(e) => eval_error = Some(e),
            }
        }
    });
    if let Some(e) = eval_error {
        return Err(e);
    }
    let (params, status) = match trained {
        Ok(out) => (out.params, ArmStatus::Ok),
        Err(TrainError::Diverged { last_good, reason, .. }) => (*last_good, ArmStatus::Diverged(reason)),
        Err(e) => return Err(e.into()),
    };
    let metrics = match status {
        ArmStatus::Ok => Some(evaluate(&params)?),
        ArmStatus::Diverged(_) => None,
    };
    Ok(ArmOutcome {
        row: AblationRow {
            variant,
            seed,
            outlier_fraction: fraction,
            status,
            metrics,
        },
        convergence,
        params,
        normalizer: split.normalizer,
    })
}

/// Runs every (fraction, variant, seed) arm in that nesting order. Diverged
/// arms are recorded and the study continues.
pub fn ablation_report(setup: &ArmSetup, spec: &AblationSpec) -> Result<AblationReport, EvalError> {
    ablation_report_with(setup, spec, |_| Ok(()))
}

/// [`ablation_report`] that hands every finished arm to `on_arm` first.
pub fn ablation_report_with<F>(setup: &ArmSetup, spec: &AblationSpec, mut on_arm: F) -> Result<AblationReport, EvalError>
where
    F: FnMut(&ArmOutcome) -> Result<(), EvalError>,
{
    if spec.seeds.is_empty() || spec.variants.is_empty() || spec.outlier_fractions.is_empty() {
        return Err(EvalError::Config("ablation needs at least one seed, variant and fraction".into()));
    }
    let mut report = AblationReport::default();
    for &fraction in &spec.outlier_fractions {
        for &variant in &spec.variants {
            for &seed in &spec.seeds {
                let arm = run_arm(setup, variant, seed, fraction, &spec.outlier_factors, spec.eval_every)?;
                on_arm(&arm)?;
                report.rows.push(arm.row);
                report.convergence.extend(arm.convergence);
            }
        }
    }
    Ok(report)
}
