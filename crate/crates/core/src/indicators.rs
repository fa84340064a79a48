//! Technical-indicator features per asset: Bollinger bands, CCI, RSI, true
//! range, DMI (+DI/−DI/ADX), MACD and MFI, plus the adjusted close.
//!
//! Every series is causal: the value at day `t` reads only days `≤ t`. Days
//! before an indicator's first valid index are `NaN`; [`FeaturePanel::warmup`]
//! is the first day on which every feature is defined.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{DataError, PanelData};

#[derive(Debug, Error)]
pub enum IndicatorError {
    #[error("{indicator} needs more than {len} days for asset {asset} (first valid index {needed})")]
    WindowTooLong {
        indicator: &'static str,
        asset: String,
        needed: usize,
        len: usize,
    },
    #[error("invalid indicator config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Window lengths and spans of every indicator family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorConfig {
    pub boll_window: usize,
    pub boll_k: f64,
    pub cci_window: usize,
    pub rsi_window: usize,
    pub dmi_window: usize,
    pub macd_fast: usize,
    pub macd_slow: usize,
    pub macd_signal: usize,
    pub mfi_window: usize,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            boll_window: 20,
            boll_k: 2.0,
            cci_window: 14,
            rsi_window: 14,
            dmi_window: 14,
            macd_fast: 12,
            macd_slow: 26,
            macd_signal: 9,
            mfi_window: 14,
        }
    }
}

impl IndicatorConfig {
    pub fn validate(&self) -> Result<(), IndicatorError> {
        let windows = [
            ("boll_window", self.boll_window),
            ("cci_window", self.cci_window),
            ("rsi_window", self.rsi_window),
            ("dmi_window", self.dmi_window),
            ("macd_fast", self.macd_fast),
            ("macd_slow", self.macd_slow),
            ("macd_signal", self.macd_signal),
            ("mfi_window", self.mfi_window),
        ];
        if let Some((name, _)) = windows.iter().find(|(_, w)| *w == 0) {
            return Err(IndicatorError::Config(format!("{name} must be >= 1")));
        }
        if !(self.boll_k.is_finite() && self.boll_k >= 0.0) {
            return Err(IndicatorError::Config("boll_k must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// First valid day index of each indicator family.
    fn first_valid(&self) -> [(&'static str, usize); 7] {
        [
            ("BOLL", self.boll_window - 1),
            ("CCI", self.cci_window - 1),
            ("RSI", self.rsi_window),
            ("TR", 0),
            ("DMI", 2 * self.dmi_window - 1),
            ("MACD", self.macd_slow.max(self.macd_fast) - 1 + self.macd_signal - 1),
            ("MFI", self.mfi_window),
        ]
    }

    /// Number of leading days without a complete feature vector.
    pub fn warmup(&self) -> usize {
        self.first_valid().iter().map(|(_, i)| *i).max().unwrap_or(0)
    }
}

pub const FEATURE_NAMES: [&str; 14] = [
    "boll_upper",
    "boll_middle",
    "boll_lower",
    "cci",
    "rsi",
    "tr",
    "plus_di",
    "minus_di",
    "adx",
    "macd",
    "macd_signal",
    "macd_hist",
    "mfi",
    "adj_close",
];

/// Features expressed in price units; divided by the same day's adjusted
/// close before z-scoring.
pub const PRICE_LEVEL_FEATURES: [&str; 8] = [
    "boll_upper",
    "boll_middle",
    "boll_lower",
    "tr",
    "macd",
    "macd_signal",
    "macd_hist",
    "adj_close",
];

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|n| *n == name)
}

fn sma_at(x: &[f64], end: usize, w: usize) -> f64 {
    x[end + 1 - w..=end].iter().sum::<f64>() / w as f64
}

/// Bollinger bands `(upper, middle, lower)` with population standard deviation.
pub fn bollinger(close: &[f64], w: usize, k: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = close.len();
    let (mut up, mut mid, mut lo) = (vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n]);
    for t in (w - 1)..n {
        let m = sma_at(close, t, w);
        let var = close[t + 1 - w..=t].iter().map(|c| (c - m).powi(2)).sum::<f64>() / w as f64;
        let sd = var.sqrt();
        mid[t] = m;
        up[t] = m + k * sd;
        lo[t] = m - k * sd;
    }
    (up, mid, lo)
}

fn typical_price(high: &[f64], low: &[f64], close: &[f64]) -> Vec<f64> {
    high.iter().zip(low).zip(close).map(|((h, l), c)| (h + l + c) / 3.0).collect()
}

/// Commodity channel index; a window with zero mean deviation yields 0.
pub fn cci(high: &[f64], low: &[f64], close: &[f64], w: usize) -> Vec<f64> {
    let tp = typical_price(high, low, close);
    let mut out = vec![f64::NAN; tp.len()];
    for t in (w - 1)..tp.len() {
        let m = sma_at(&tp, t, w);
        let mad = tp[t + 1 - w..=t].iter().map(|x| (x - m).abs()).sum::<f64>() / w as f64;
        out[t] = if mad == 0.0 { 0.0 } else { (tp[t] - m) / (0.015 * mad) };
    }
    out
}

/// Wilder RSI. Zero average loss gives 100, otherwise zero average gain gives 0.
pub fn rsi(close: &[f64], w: usize) -> Vec<f64> {
    let n = close.len();
    let mut out = vec![f64::NAN; n];
    if n <= w {
        return out;
    }
    let (mut gain, mut loss) = (0.0, 0.0);
    for t in 1..=w {
        let d = close[t] - close[t - 1];
        gain += d.max(0.0);
        loss += (-d).max(0.0);
    }
    gain /= w as f64;
    loss /= w as f64;
    let value = |g: f64, l: f64| {
        if l == 0.0 {
            100.0
        } else if g == 0.0 {
            0.0
        } else {
            100.0 - 100.0 / (1.0 + g / l)
        }
    };
    out[w] = value(gain, loss);
    for t in (w + 1)..n {
        let d = close[t] - close[t - 1];
        gain = (gain * (w - 1) as f64 + d.max(0.0)) / w as f64;
        loss = (loss * (w - 1) as f64 + (-d).max(0.0)) / w as f64;
        out[t] = value(gain, loss);
    }
    out
}

/// True range; the first day uses `high − low`.
pub fn true_range(high: &[f64], low: &[f64], close: &[f64]) -> Vec<f64> {
    (0..close.len())
        .map(|t| {
            let hl = high[t] - low[t];
            if t == 0 {
                hl
            } else {
                let pc = close[t - 1];
                hl.max((high[t] - pc).abs()).max((low[t] - pc).abs())
            }
        })
        .collect()
}

/// Wilder directional movement: `(+DI, −DI, ADX)`.
pub fn dmi(high: &[f64], low: &[f64], close: &[f64], w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = close.len();
    let (mut pdi, mut mdi, mut adx) = (vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n]);
    if n <= w {
        return (pdi, mdi, adx);
    }
    let tr = true_range(high, low, close);
    let mut pdm = vec![0.0; n];
    let mut mdm = vec![0.0; n];
    for t in 1..n {
        let up = high[t] - high[t - 1];
        let down = low[t - 1] - low[t];
        if up > down && up > 0.0 {
            pdm[t] = up;
        }
        if down > up && down > 0.0 {
            mdm[t] = down;
        }
    }
    let (mut s_tr, mut s_p, mut s_m): (f64, f64, f64) =
        (tr[1..=w].iter().sum(), pdm[1..=w].iter().sum(), mdm[1..=w].iter().sum());
    let mut dx = vec![f64::NAN; n];
    let di = |s: f64, s_tr: f64| if s == 0.0 || s_tr == 0.0 { 0.0 } else { 100.0 * s / s_tr };
    for t in w..n {
        if t > w {
            let wf = w as f64;
            s_tr = s_tr - s_tr / wf + tr[t];
            s_p = s_p - s_p / wf + pdm[t];
            s_m = s_m - s_m / wf + mdm[t];
        }
        pdi[t] = di(s_p, s_tr);
        mdi[t] = di(s_m, s_tr);
        let total = pdi[t] + mdi[t];
        dx[t] = if total == 0.0 { 0.0 } else { 100.0 * (pdi[t] - mdi[t]).abs() / total };
    }
    let first = 2 * w - 1;
    if n > first {
        adx[first] = dx[w..=first].iter().sum::<f64>() / w as f64;
        for t in (first + 1)..n {
            adx[t] = (adx[t - 1] * (w - 1) as f64 + dx[t]) / w as f64;
        }
    }
    (pdi, mdi, adx)
}

/// EMA seeded with the SMA of the first `span` defined values of `x`.
/// Leading `NaN`s in `x` are skipped.
pub fn ema(x: &[f64], span: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![f64::NAN; n];
    let Some(start) = x.iter().position(|v| !v.is_nan()) else {
        return out;
    };
    let seed_end = start + span - 1;
    if seed_end >= n {
        return out;
    }
    let alpha = 2.0 / (span as f64 + 1.0);
    out[seed_end] = x[start..=seed_end].iter().sum::<f64>() / span as f64;
    for t in (seed_end + 1)..n {
        out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1];
    }
    out
}

/// MACD `(line, signal, histogram)`.
pub fn macd(close: &[f64], fast: usize, slow: usize, signal: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ef, es) = (ema(close, fast), ema(close, slow));
    let line: Vec<f64> = ef.iter().zip(&es).map(|(a, b)| a - b).collect();
    let sig = ema(&line, signal);
    let hist = line.iter().zip(&sig).map(|(a, b)| a - b).collect();
    (line, sig, hist)
}

/// Money flow index. Zero negative flow gives 100; no flow at all gives 50.
pub fn mfi(high: &[f64], low: &[f64], close: &[f64], volume: &[f64], w: usize) -> Vec<f64> {
    let tp = typical_price(high, low, close);
    let n = tp.len();
    let mut out = vec![f64::NAN; n];
    let mut pos = vec![0.0; n];
    let mut neg = vec![0.0; n];
    for t in 1..n {
        let flow = tp[t] * volume[t];
        if tp[t] > tp[t - 1] {
            pos[t] = flow;
        } else if tp[t] < tp[t - 1] {
            neg[t] = flow;
        }
    }
    for t in w..n {
        let p: f64 = pos[t + 1 - w..=t].iter().sum();
        let m: f64 = neg[t + 1 - w..=t].iter().sum();
        out[t] = match (p == 0.0, m == 0.0) {
            (true, true) => 50.0,
            (_, true) => 100.0,
            _ => 100.0 - 100.0 / (1.0 + p / m),
        };
    }
    out
}

/// Per-day, per-asset feature vectors plus the raw adjusted closes.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePanel {
    pub dates: Vec<chrono::NaiveDate>,
    pub tickers: Vec<String>,
    pub names: Vec<String>,
    /// `[day][asset][feature]`, flattened.
    pub values: Vec<f64>,
    /// Adjusted closes `[day][asset]`.
    pub prices: Vec<Vec<f64>>,
    /// First day index with every feature defined.
    pub warmup: usize,
}

impl FeaturePanel {
    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, day: usize, asset: usize, feature: usize) -> f64 {
        let (n, f) = (self.n_assets(), self.n_features());
        self.values[(day * n + asset) * f + feature]
    }

    /// Feature vector of one (day, asset) cell.
    pub fn cell(&self, day: usize, asset: usize) -> &[f64] {
        let (n, f) = (self.n_assets(), self.n_features());
        let start = (day * n + asset) * f;
        &self.values[start..start + f]
    }

    /// All assets' features on one day, `[asset][feature]` flattened.
    pub fn day(&self, day: usize) -> &[f64] {
        let width = self.n_assets() * self.n_features();
        &self.values[day * width..(day + 1) * width]
    }

    /// Column of one feature for one asset across all days.
    pub fn column(&self, asset: usize, feature: usize) -> Vec<f64> {
        (0..self.n_days()).map(|d| self.get(d, asset, feature)).collect()
    }
}

/// Computes every feature family for every asset of a complete panel.
pub fn compute_features(panel: &PanelData, config: &IndicatorConfig) -> Result<FeaturePanel, IndicatorError> {
    config.validate()?;
    if panel.n_dates() == 0 || panel.n_assets() == 0 {
        return Err(DataError::Empty("no data to compute features from".into()).into());
    }
    let high = panel.series(|b| b.high)?;
    let low = panel.series(|b| b.low)?;
    let close = panel.series(|b| b.close)?;
    let adj = panel.series(|b| b.adj_close)?;
    let volume = panel.series(|b| b.volume)?;
    let days = panel.n_dates();
    for (name, first) in config.first_valid() {
        if first >= days {
            return Err(IndicatorError::WindowTooLong {
                indicator: name,
                asset: panel.tickers()[0].clone(),
                needed: first,
                len: days,
            });
        }
    }

    let n = panel.n_assets();
    let f = FEATURE_NAMES.len();
    let mut values = vec![f64::NAN; days * n * f];
    for k in 0..n {
        let (h, l, c) = (&high[k], &low[k], &close[k]);
        let (bu, bm, bl) = bollinger(c, config.boll_window, config.boll_k);
        let (pdi, mdi, adx) = dmi(h, l, c, config.dmi_window);
        let (ml, ms, mh) = macd(c, config.macd_fast, config.macd_slow, config.macd_signal);
        let columns: [Vec<f64>; 14] = [
            bu,
            bm,
            bl,
            cci(h, l, c, config.cci_window),
            rsi(c, config.rsi_window),
            true_range(h, l, c),
            pdi,
            mdi,
            adx,
            ml,
            ms,
            mh,
            mfi(h, l, c, &volume[k], config.mfi_window),
            adj[k].clone(),
        ];
        for (j, col) in columns.iter().enumerate() {
            for (d, v) in col.iter().enumerate() {
                values[(d * n + k) * f + j] = *v;
            }
        }
    }
    Ok(FeaturePanel {
        dates: panel.dates().to_vec(),
        tickers: panel.tickers().to_vec(),
        names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        values,
        prices: panel.adj_close_matrix()?,
        warmup: config.warmup(),
    })
}

/// Per-asset, per-feature z-score statistics fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNormalizer {
    /// `[asset][feature]` flattened.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_assets: usize,
    pub n_features: usize,
}

impl FeatureNormalizer {
    /// Fits on the post-warm-up rows of a training feature panel.
    pub fn fit(train: &FeaturePanel) -> Result<Self, IndicatorError> {
        let (n, f) = (train.n_assets(), train.n_features());
        let rows = train.warmup..train.n_days();
        if rows.is_empty() {
            return Err(DataError::Empty("no post-warm-up rows to fit normalization on".into()).into());
        }
        let is_price = price_level_mask(&train.names);
        let mut mean = vec![0.0; n * f];
        let mut std = vec![1.0; n * f];
        let count = rows.len() as f64;
        for k in 0..n {
            for j in 0..f {
                let x = |d: usize| train.get(d, k, j) / if is_price[j] { train.prices[d][k] } else { 1.0 };
                let m = rows.clone().map(x).sum::<f64>() / count;
                let var = rows.clone().map(|d| (x(d) - m).powi(2)).sum::<f64>() / count;
                mean[k * f + j] = m;
                let sd = var.sqrt();
                std[k * f + j] = if sd < 1e-12 { 1.0 } else { sd };
            }
        }
        Ok(FeatureNormalizer {
            mean,
            std,
            n_assets: n,
            n_features: f,
        })
    }

    /// Returns a copy of `panel` with standardized feature values; prices stay raw.
    pub fn apply(&self, panel: &FeaturePanel) -> Result<FeaturePanel, IndicatorError> {
        let (n, f) = (panel.n_assets(), panel.n_features());
        if n != self.n_assets || f != self.n_features {
            return Err(IndicatorError::Config(format!(
                "normalizer fitted on {}x{} features, panel has {n}x{f}",
                self.n_assets, self.n_features
            )));
        }
        let is_price = price_level_mask(&panel.names);
        let mut out = panel.clone();
        for d in 0..panel.n_days() {
            for k in 0..n {
                for j in 0..f {
                    let div = if is_price[j] { panel.prices[d][k] } else { 1.0 };
                    let idx = (d * n + k) * f + j;
                    out.values[idx] = (panel.values[idx] / div - self.mean[k * f + j]) / self.std[k * f + j];
                }
            }
        }
        Ok(out)
    }
}

/// Normalized training and test feature panels sharing one normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSplit {
    pub normalizer: FeatureNormalizer,
    pub train: FeaturePanel,
    /// Features over `history` followed by the test days.
    pub test: FeaturePanel,
    /// Index of the first test day within `test`.
    pub test_start: usize,
}

/// Computes and normalizes features for training on `train` and testing on
/// `test`. Test indicators run over `history` (the uncontaminated training
/// period) concatenated with `test`, so no test days are lost to warm-up.
pub fn prepare_split(
    train: &PanelData,
    history: &PanelData,
    test: &PanelData,
    config: &IndicatorConfig,
) -> Result<PreparedSplit, IndicatorError> {
    let train_raw = compute_features(train, config)?;
    let normalizer = FeatureNormalizer::fit(&train_raw)?;
    let (test, test_start) = test_features(history, test, &normalizer, config)?;
    Ok(PreparedSplit {
        train: normalizer.apply(&train_raw)?,
        test,
        test_start,
        normalizer,
    })
}

/// Normalized features over `history` followed by `test`, and the index of
/// the first test day.
pub fn test_features(
    history: &PanelData,
    test: &PanelData,
    normalizer: &FeatureNormalizer,
    config: &IndicatorConfig,
) -> Result<(FeaturePanel, usize), IndicatorError> {
    let joined = history.concat(test)?;
    let raw = compute_features(&joined, config)?;
    Ok((normalizer.apply(&raw)?, history.n_dates()))
}

fn price_level_mask(names: &[String]) -> Vec<bool> {
    names.iter().map(|n| PRICE_LEVEL_FEATURES.contains(&n.as_str())).collect()
}
