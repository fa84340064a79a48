//! Daily-rebalance portfolio environment with proportional transaction costs.
//!
//! At step index `t` the agent sees feature rows `t − window ..= t − 1`,
//! trades at the previous adjusted close `V_{t−1}`, then holds the new share
//! vector until `V_t`. The reward is the resulting change in portfolio value:
//!
//! `ΔP_t = W_tᵀ(V_t − V_{t−1}) − c (B_t + M_t)ᵀ V_{t−1}`
//!
//! so cumulative rewards telescope to `P_T − P_0`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::FeaturePanel;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("panel has {len} days but the episode needs at least {required} (warm-up + window + 1)")]
    TooShort { required: usize, len: usize },
    #[error("invalid env config: {0}")]
    Config(String),
    #[error("invalid action: {0}")]
    Action(String),
    #[error("step called after the episode finished")]
    Done,
    #[error("replay expects {expected} actions, got {got}")]
    ReplayLength { expected: usize, got: usize },
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// How raw currency rewards are scaled before they reach the learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScale {
    /// Divide by the initial cash `P_0`.
    InitialValue,
    /// Raw currency units.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub cost_rate: f64,
    pub initial_cash: f64,
    pub window: usize,
    pub reward_scale: RewardScale,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            cost_rate: 0.001,
            initial_cash: 1e6,
            window: 30,
            reward_scale: RewardScale::InitialValue,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.0..0.05).contains(&self.cost_rate) {
            return Err(EnvError::Config(format!("cost_rate must be in [0, 0.05), got {}", self.cost_rate)));
        }
        if !(self.initial_cash.is_finite() && self.initial_cash > 0.0) {
            return Err(EnvError::Config(format!("initial_cash must be > 0, got {}", self.initial_cash)));
        }
        if self.window == 0 {
            return Err(EnvError::Config("window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cash `A_t`, share counts `W_t` and the prices they were last valued at.
#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioAccount {
    pub cash: f64,
    pub shares: Vec<f64>,
}

impl PortfolioAccount {
    pub fn all_cash(cash: f64, n_assets: usize) -> Self {
        PortfolioAccount {
            cash,
            shares: vec![0.0; n_assets],
        }
    }

    /// `P = A + WᵀV`.
    pub fn value(&self, prices: &[f64]) -> f64 {
        self.cash + self.shares.iter().zip(prices).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Allocation fractions, assets first and cash last.
    pub fn allocation(&self, prices: &[f64]) -> Vec<f64> {
        let p = self.value(prices);
        let mut out: Vec<f64> = self.shares.iter().zip(prices).map(|(w, v)| w * v / p).collect();
        out.push(self.cash / p);
        out
    }
}

/// Shares bought `B_t` and sold `M_t` in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct TradePair {
    pub buys: Vec<f64>,
    pub sells: Vec<f64>,
}

impl TradePair {
    /// Traded notional `(B + M)ᵀV`.
    pub fn notional(&self, prices: &[f64]) -> f64 {
        self.buys.iter().zip(&self.sells).zip(prices).map(|((b, m), v)| (b + m) * v).sum()
    }
}

/// Checks that `target` is a length-`n + 1` allocation on the simplex.
pub fn validate_target(target: &[f64], n_assets: usize) -> Result<(), EnvError> {
    if target.len() != n_assets + 1 {
        return Err(EnvError::Action(format!(
            "expected {} fractions (assets + cash), got {}",
            n_assets + 1,
            target.len()
        )));
    }
    if let Some(i) = target.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(EnvError::Action(format!("fraction {i} is {}", target[i])));
    }
    let sum: f64 = target.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(EnvError::Action(format!("fractions sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Converts target fractions into share trades at `prices`.
///
/// Sells settle first; if the cost-inclusive buys exceed the cash then
/// available, all buys shrink by one common factor.
pub fn target_to_trades(
    account: &PortfolioAccount,
    target: &[f64],
    prices: &[f64],
    cost_rate: f64,
) -> Result<TradePair, EnvError> {
    let n = account.shares.len();
    validate_target(target, n)?;
    if let Some(i) = prices.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(EnvError::Action(format!("price {i} is {}", prices[i])));
    }
    let value = account.value(prices);
    let mut buys = vec![0.0; n];
    let mut sells = vec![0.0; n];
    for i in 0..n {
        let desired = target[i] * value / prices[i];
        let held = account.shares[i];
        if (desired - held).abs() <= 1e-9 * desired.abs().max(held.abs()) {
            continue;
        }
        if desired > held {
            buys[i] = desired - held;
        } else {
            sells[i] = held - desired;
        }
    }
    let available = account.cash + (0..n).map(|i| sells[i] * prices[i]).sum::<f64>() * (1.0 - cost_rate);
    let cost = (0..n).map(|i| buys[i] * prices[i]).sum::<f64>() * (1.0 + cost_rate);
    if cost > available {
        let factor = (available / cost).max(0.0);
        buys.iter_mut().for_each(|b| *b *= factor);
    }
    Ok(TradePair { buys, sells })
}

/// Applies trades at `prices`: cash by the fee-inclusive cash identity, shares
/// by `W_t = W_{t−1} + B_t − M_t`.
fn settle(account: &PortfolioAccount, trades: &TradePair, prices: &[f64], cost_rate: f64) -> PortfolioAccount {
    let n = account.shares.len();
    let sold: f64 = (0..n).map(|i| trades.sells[i] * prices[i]).sum();
    let bought: f64 = (0..n).map(|i| trades.buys[i] * prices[i]).sum();
    let mut cash = account.cash + sold * (1.0 - cost_rate) - bought * (1.0 + cost_rate);
    if cash < 0.0 {
        // only reachable through rounding after buy scaling
        cash = 0.0;
    }
    let shares = (0..n)
        .map(|i| (account.shares[i] + trades.buys[i] - trades.sells[i]).max(0.0))
        .collect();
    PortfolioAccount { cash, shares }
}

/// `window × n × (F + 2)` observation; the two trailing channels are the cash
/// fraction and the asset's own weight fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTensor {
    pub window: usize,
    pub n_assets: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl StateTensor {
    pub fn get(&self, row: usize, asset: usize, channel: usize) -> f64 {
        self.values[(row * self.n_assets + asset) * self.channels + channel]
    }

    /// One row flattened over `asset × channel`.
    pub fn row(&self, row: usize) -> &[f64] {
        let width = self.n_assets * self.channels;
        &self.values[row * width..(row + 1) * width]
    }

    pub fn row_width(&self) -> usize {
        self.n_assets * self.channels
    }

    /// `window × (n · channels)` matrix, the policy's input layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.window, self.row_width()], self.values.clone()).expect("state layout")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccountSnapshot {
    pub day: usize,
    pub date: chrono::NaiveDate,
    pub portfolio_value: f64,
    pub cash: f64,
    pub shares: Vec<f64>,
    /// Allocation after the step, valued at this day's close; cash last.
    pub weights: Vec<f64>,
    pub reward: f64,
    /// Traded notional over the pre-trade portfolio value.
    pub turnover: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: StateTensor,
    pub reward: f64,
    pub done: bool,
    pub info: AccountSnapshot,
}

/// One episode over a (normalized) feature panel.
#[derive(Clone, Debug)]
pub struct PortfolioEnv {
    panel: Arc<FeaturePanel>,
    config: EnvConfig,
    first_step: usize,
    t: usize,
    account: PortfolioAccount,
    /// Per-day allocation before that day's trade, `[cash, w_1..w_n]`.
    history: Vec<Vec<f64>>,
    done: bool,
}

impl PortfolioEnv {
    /// Minimum panel length for an episode of at least one step.
    pub fn required_len(warmup: usize, window: usize) -> usize {
        warmup + window + 1
    }

    /// Starts an episode at the first post-warm-up step.
    pub fn reset(panel: Arc<FeaturePanel>, config: EnvConfig) -> Result<(Self, StateTensor), EnvError> {
        let first = panel.warmup + config.window;
        Self::reset_at(panel, config, first)
    }

    /// Starts an episode at `first_step`, which must leave a full window of
    /// post-warm-up rows behind it.
    pub fn reset_at(
        panel: Arc<FeaturePanel>,
        config: EnvConfig,
        first_step: usize,
    ) -> Result<(Self, StateTensor), EnvError> {
        config.validate()?;
        let required = Self::required_len(panel.warmup, config.window);
        if panel.n_days() < required {
            return Err(EnvError::TooShort {
                required,
                len: panel.n_days(),
            });
        }
        if first_step < panel.warmup + config.window || first_step >= panel.n_days() {
            return Err(EnvError::Config(format!(
                "first step {first_step} outside [{}, {})",
                panel.warmup + config.window,
                panel.n_days()
            )));
        }
        let n = panel.n_assets();
        let mut cash_only = vec![0.0; n + 1];
        cash_only[0] = 1.0;
        let env = PortfolioEnv {
            history: vec![cash_only; panel.n_days()],
            account: PortfolioAccount::all_cash(config.initial_cash, n),
            first_step,
            t: first_step,
            done: false,
            panel,
            config,
        };
        let state = env.state();
        Ok((env, state))
    }

    pub fn panel(&self) -> &Arc<FeaturePanel> {
        &self.panel
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn n_assets(&self) -> usize {
        self.panel.n_assets()
    }

    pub fn account(&self) -> &PortfolioAccount {
        &self.account
    }

    /// Day index the next step will value holdings at.
    pub fn current_step(&self) -> usize {
        self.t
    }

    pub fn first_step(&self) -> usize {
        self.first_step
    }

    pub fn episode_len(&self) -> usize {
        self.panel.n_days() - self.first_step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Current portfolio value at the latest close the agent has seen.
    pub fn portfolio_value(&self) -> f64 {
        self.account.value(&self.panel.prices[self.t - 1])
    }

    /// Allocation at the previous close, assets first and cash last.
    pub fn current_allocation(&self) -> Vec<f64> {
        self.account.allocation(&self.panel.prices[self.t - 1])
    }

    /// Observation for the pending step: rows `t − window ..= t − 1`.
    pub fn state(&self) -> StateTensor {
        let (n, f) = (self.panel.n_assets(), self.panel.n_features());
        let channels = f + 2;
        let window = self.config.window;
        let mut values = Vec::with_capacity(window * n * channels);
        for day in (self.t - window)..self.t {
            let alloc = &self.history[day];
            for k in 0..n {
                values.extend_from_slice(self.panel.cell(day, k));
                values.push(alloc[0]);
                values.push(alloc[k + 1]);
            }
        }
        StateTensor {
            window,
            n_assets: n,
            channels,
            values,
        }
    }

    fn scale(&self) -> f64 {
        match self.config.reward_scale {
            RewardScale::InitialValue => self.config.initial_cash,
            RewardScale::Raw => 1.0,
        }
    }

    /// Trades to `target` at `V_{t−1}`, values at `V_t` and advances one day.
    pub fn step(&mut self, target: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Done);
        }
        let t = self.t;
        let (prev, now) = (&self.panel.prices[t - 1], &self.panel.prices[t]);
        let c = self.config.cost_rate;
        let trades = target_to_trades(&self.account, target, prev, c)?;
        let before = self.account.value(prev);
        let next = settle(&self.account, &trades, prev, c);
        let notional = trades.notional(prev);
        let gain: f64 = next.shares.iter().zip(now.iter().zip(prev)).map(|(w, (v, p))| w * (v - p)).sum();
        let raw_reward = gain - c * notional;
        self.account = next;

        let value = self.account.value(now);
        let mut alloc = self.account.allocation(now);
        alloc.rotate_right(1);
        self.history[t] = alloc;
        let reward = raw_reward / self.scale();
        let weights = self.account.allocation(now);
        let info = AccountSnapshot {
            day: t,
            date: self.panel.dates[t],
            portfolio_value: value,
            cash: self.account.cash,
            shares: self.account.shares.clone(),
            weights,
            reward,
            turnover: notional / before,
        };
        self.done = t + 1 >= self.panel.n_days();
        if !self.done {
            self.t = t + 1;
        }
        let state = if self.done { self.state_after_end() } else { self.state() };
        Ok(StepOutcome {
            state,
            reward,
            done: self.done,
            info,
        })
    }

    /// Terminal observation: the window ending on the final day.
    fn state_after_end(&self) -> StateTensor {
        let mut shifted = self.clone();
        shifted.t = self.panel.n_days();
        shifted.state()
    }

    /// Resets to this episode's start and applies `actions` in order.
    pub fn replay(&mut self, actions: &[Vec<f64>]) -> Result<Vec<AccountSnapshot>, EnvError> {
        let expected = self.episode_len();
        if actions.len() != expected {
            return Err(EnvError::ReplayLength {
                expected,
                got: actions.len(),
            });
        }
        let (mut env, _) = Self::reset_at(self.panel.clone(), self.config.clone(), self.first_step)?;
        let mut out = Vec::with_capacity(expected);
        for a in actions {
            out.push(env.step(a)?.info);
        }
        *self = env;
        Ok(out)
    }
}

/// Writes `date,portfolio_value,cash,reward,turnover,<ticker>...`.
pub fn write_snapshots(path: impl AsRef<Path>, tickers: &[String], snaps: &[AccountSnapshot]) -> Result<(), EnvError> {
    let path = path.as_ref();
    let io = |source| EnvError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::from("date,portfolio_value,cash,reward,turnover");
    for t in tickers {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for s in snaps {
        out.push_str(&format!(
            "{},{},{},{},{}",
            s.date, s.portfolio_value, s.cash, s.reward, s.turnover
        ));
        for w in &s.weights[..tickers.len()] {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(io)?;
    file.write_all(out.as_bytes()).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn account(cash: f64, shares: &[f64]) -> PortfolioAccount {
        PortfolioAccount {
            cash,
            shares: shares.to_vec(),
        }
    }

    #[test]
    fn target_equal_to_allocation_trades_nothing() {
        let acc = account(300.0, &[2.0, 5.0]);
        let prices = [50.0, 40.0];
        let alloc = acc.allocation(&prices);
        let t = target_to_trades(&acc, &alloc, &prices, 0.001).unwrap();
        assert_eq!(t.buys, vec![0.0, 0.0]);
        assert_eq!(t.sells, vec![0.0, 0.0]);
    }

    #[test]
    fn all_in_from_cash_pays_the_fee() {
        let acc = account(1e6, &[0.0, 0.0]);
        let prices = [100.0, 20.0];
        let t = target_to_trades(&acc, &[1.0, 0.0, 0.0], &prices, 0.001).unwrap();
        let expected = 1e6 / (100.0 * 1.001);
        assert!((t.buys[0] - expected).abs() < 1e-9);
        let after = settle(&acc, &t, &prices, 0.001);
        assert!(after.cash.abs() < 1e-6, "{}", after.cash);
    }

    #[test]
    fn liquidation_sells_everything() {
        let acc = account(10.0, &[3.0, 7.0]);
        let t = target_to_trades(&acc, &[0.0, 0.0, 1.0], &[5.0, 9.0], 0.002).unwrap();
        assert_eq!(t.sells, vec![3.0, 7.0]);
        assert_eq!(t.buys, vec![0.0, 0.0]);
    }

    #[test]
    fn bad_targets_are_rejected() {
        let acc = account(1.0, &[0.0]);
        assert!(target_to_trades(&acc, &[0.5, 0.6], &[1.0], 0.0).is_err());
        assert!(target_to_trades(&acc, &[-0.1, 1.1], &[1.0], 0.0).is_err());
        assert!(target_to_trades(&acc, &[1.0], &[1.0], 0.0).is_err());
    }
}
