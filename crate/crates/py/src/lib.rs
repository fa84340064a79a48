//! Python bindings: synthetic markets, the accounting simulator, the four
//! metrics and the `migt` command line.

use std::collections::BTreeMap;
use std::sync::Arc;

use migt_core::backtest_eval::{compute_metrics, EquityCurve, MetricValue, MetricsConfig};
use migt_core::cli::main_with_args;
use migt_core::indicators::FeaturePanel;
use migt_core::market_data::{business_days, synth_market, SynthSpec};
use migt_core::portfolio_env::{EnvConfig, PortfolioEnv};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Adjusted closes `[day][asset]` of a seeded geometric random walk.
#[pyfunction]
#[pyo3(signature = (n_assets, n_days, drift, volatility, seed=0))]
fn synth_prices(n_assets: usize, n_days: usize, drift: f64, volatility: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let panel = synth_market(&SynthSpec::uniform(n_assets, n_days, drift, volatility, seed)).map_err(value_error)?;
    panel.adj_close_matrix().map_err(value_error)
}

/// Replays target allocations (cash last) on a price matrix, one action per
/// day after the first. Returns `(portfolio_values, rewards)`, with values
/// starting at `initial_cash` and rewards as fractions of it.
#[pyfunction]
#[pyo3(signature = (prices, actions, cost_rate=0.001, initial_cash=1e6))]
fn simulate(
    prices: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    cost_rate: f64,
    initial_cash: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let (days, n) = (prices.len(), prices.first().map_or(0, Vec::len));
    if days < 2 || n == 0 || prices.iter().any(|row| row.len() != n) {
        return Err(value_error("prices must be a rectangular [day][asset] matrix with >= 2 days"));
    }
    let panel = Arc::new(FeaturePanel {
        dates: business_days(days),
        tickers: (0..n).map(|k| format!("A{k}")).collect(),
        names: vec!["price".into()],
        values: vec![0.0; days * n],
        prices,
        warmup: 0,
    });
    let config = EnvConfig {
        cost_rate,
        initial_cash,
        window: 1,
        ..EnvConfig::default()
    };
    let (mut env, _) = PortfolioEnv::reset(panel, config).map_err(value_error)?;
    if actions.len() != env.episode_len() {
        return Err(value_error(format!("expected {} actions, got {}", env.episode_len(), actions.len())));
    }
    let mut values = vec![initial_cash];
    let mut rewards = Vec::with_capacity(actions.len());
    for a in &actions {
        let out = env.step(a).map_err(value_error)?;
        values.push(out.info.portfolio_value);
        rewards.push(out.reward);
    }
    Ok((values, rewards))
}

/// Cumulative return, Sharpe, Omega and Sortino of a daily value series.
/// Degenerate ratios come back as `None`.
#[pyfunction]
#[pyo3(signature = (values, risk_free_annual=0.03, min_acceptable_annual=0.03, omega_threshold_annual=0.03))]
fn metrics(
    values: Vec<f64>,
    risk_free_annual: f64,
    min_acceptable_annual: f64,
    omega_threshold_annual: f64,
) -> PyResult<BTreeMap<&'static str, Option<f64>>> {
    let config = MetricsConfig {
        risk_free_annual,
        min_acceptable_annual,
        omega_threshold_annual,
        ..MetricsConfig::default()
    };
    config.validate().map_err(value_error)?;
    let curve = EquityCurve::new(business_days(values.len()), values).map_err(value_error)?;
    let m = compute_metrics(&curve, &config);
    Ok(BTreeMap::from([
        ("cum_return", Some(m.cum_return)),
        ("sharpe", MetricValue::value(m.sharpe)),
        ("omega", MetricValue::value(m.omega)),
        ("sortino", MetricValue::value(m.sortino)),
    ]))
}

/// Runs the `migt` command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> u8 {
    let argv: Vec<String> = std::iter::once("migt".to_string()).chain(args).collect();
    py.detach(|| main_with_args(argv))
}

#[pymodule]
fn migt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth_prices, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
