//! OHLCV panels: CSV ingest, calendar alignment, train/test splits, outlier
//! injection and synthetic market generation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const CSV_HEADER: [&str; 8] = ["date", "ticker", "open", "high", "low", "close", "adj_close", "volume"];

/// Default multiplicative shocks applied by [`inject_outliers`].
pub const DEFAULT_OUTLIER_FACTORS: [f64; 2] = [0.5, 2.0];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("line {line}: duplicate row for ({date}, {ticker})")]
    Duplicate { line: u64, date: NaiveDate, ticker: String },
    #[error("panel is empty: {0}")]
    Empty(String),
    #[error("{0}")]
    Contract(String),
}

/// One daily bar. Prices in currency units, volume in shares.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: f64,
}

impl Bar {
    /// Checks `high ≥ max(open, close) ≥ min(open, close) ≥ low > 0` and `volume ≥ 0`.
    pub fn validate(&self) -> Result<(), String> {
        let fields = [self.open, self.high, self.low, self.close, self.adj_close, self.volume];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err("non-finite field".into());
        }
        if self.low <= 0.0 || self.adj_close <= 0.0 {
            return Err("prices must be positive".into());
        }
        if self.high < self.open.max(self.close) {
            return Err(format!("high {} below open/close", self.high));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!("low {} above open/close", self.low));
        }
        if self.volume < 0.0 {
            return Err(format!("negative volume {}", self.volume));
        }
        Ok(())
    }

    fn scaled(&self, factor: f64) -> Bar {
        let (open, close) = (self.open * factor, self.close * factor);
        Bar {
            open,
            close,
            high: (self.high * factor).max(open.max(close)),
            low: (self.low * factor).min(open.min(close)),
            adj_close: self.adj_close * factor,
            volume: self.volume,
        }
    }

    /// Outlier shock: OHLC scaled, adjusted close and volume untouched.
    fn shocked(&self, factor: f64) -> Bar {
        Bar {
            adj_close: self.adj_close,
            ..self.scaled(factor)
        }
    }
}

/// Inclusive calendar range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        DateRange { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

/// Dates × tickers grid of bars. Cells may be missing until the panel is
/// aligned; a complete panel has a bar in every cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelData {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    cells: Vec<Option<Bar>>,
}

impl PanelData {
    /// Builds a panel from date-major cells. Dates must be strictly increasing.
    pub fn new(dates: Vec<NaiveDate>, tickers: Vec<String>, cells: Vec<Option<Bar>>) -> Result<Self, DataError> {
        if cells.len() != dates.len() * tickers.len() {
            return Err(DataError::Contract(format!(
                "{} cells for {} dates x {} tickers",
                cells.len(),
                dates.len(),
                tickers.len()
            )));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Contract("dates must be strictly increasing".into()));
        }
        for (i, bar) in cells.iter().enumerate() {
            if let Some(b) = bar {
                b.validate().map_err(|e| {
                    DataError::Contract(format!(
                        "invalid bar ({}, {}): {e}",
                        dates[i / tickers.len()],
                        tickers[i % tickers.len()]
                    ))
                })?;
            }
        }
        Ok(PanelData { dates, tickers, cells })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn bar(&self, day: usize, asset: usize) -> Option<&Bar> {
        self.cells[day * self.tickers.len() + asset].as_ref()
    }

    /// Number of present (date, ticker) records.
    pub fn record_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    fn require_complete(&self) -> Result<(), DataError> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(DataError::Contract("panel has missing (date, ticker) cells; align it first".into()))
        }
    }

    /// Per-asset series of one field, `[asset][day]`. Requires a complete panel.
    pub fn series(&self, field: impl Fn(&Bar) -> f64) -> Result<Vec<Vec<f64>>, DataError> {
        self.require_complete()?;
        let n = self.n_assets();
        Ok((0..n)
            .map(|k| (0..self.n_dates()).map(|d| field(self.cells[d * n + k].as_ref().unwrap())).collect())
            .collect())
    }

    /// Adjusted closes, `[day][asset]`; the canonical trade/valuation price.
    pub fn adj_close_matrix(&self) -> Result<Vec<Vec<f64>>, DataError> {
        self.require_complete()?;
        let n = self.n_assets();
        Ok((0..self.n_dates())
            .map(|d| (0..n).map(|k| self.cells[d * n + k].as_ref().unwrap().adj_close).collect())
            .collect())
    }

    /// Restricts to the given day indices and asset indices (both ascending).
    fn select(&self, days: &[usize], assets: &[usize]) -> PanelData {
        let n = self.n_assets();
        let cells = days
            .iter()
            .flat_map(|&d| assets.iter().map(move |&k| (d, k)))
            .map(|(d, k)| self.cells[d * n + k])
            .collect();
        PanelData {
            dates: days.iter().map(|&d| self.dates[d]).collect(),
            tickers: assets.iter().map(|&k| self.tickers[k].clone()).collect(),
            cells,
        }
    }

    /// Keeps only tickers with a bar on every date; returns the dropped tickers.
    pub fn drop_incomplete(&self) -> (PanelData, Vec<String>) {
        let n = self.n_assets();
        let (keep, dropped): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&k| (0..self.n_dates()).all(|d| self.cells[d * n + k].is_some()));
        let days: Vec<usize> = (0..self.n_dates()).collect();
        (
            self.select(&days, &keep),
            dropped.into_iter().map(|k| self.tickers[k].clone()).collect(),
        )
    }

    /// Days within `range`.
    pub fn slice_dates(&self, range: DateRange) -> PanelData {
        let days: Vec<usize> = (0..self.n_dates()).filter(|&d| range.contains(self.dates[d])).collect();
        let assets: Vec<usize> = (0..self.n_assets()).collect();
        self.select(&days, &assets)
    }

    /// Day indices `start..end`.
    pub fn slice_days(&self, start: usize, end: usize) -> PanelData {
        let days: Vec<usize> = (start..end.min(self.n_dates())).collect();
        let assets: Vec<usize> = (0..self.n_assets()).collect();
        self.select(&days, &assets)
    }

    /// Appends `later` after `self`. Tickers must match and dates must not overlap.
    pub fn concat(&self, later: &PanelData) -> Result<PanelData, DataError> {
        if self.tickers != later.tickers {
            return Err(DataError::Contract("cannot concatenate panels with different tickers".into()));
        }
        if let (Some(a), Some(b)) = (self.dates.last(), later.dates.first()) {
            if a >= b {
                return Err(DataError::Contract(format!("panels overlap: {a} >= {b}")));
            }
        }
        let mut dates = self.dates.clone();
        dates.extend_from_slice(&later.dates);
        let mut cells = self.cells.clone();
        cells.extend_from_slice(&later.cells);
        Ok(PanelData {
            dates,
            tickers: self.tickers.clone(),
            cells,
        })
    }

    /// Returns a copy with every price field of every bar multiplied by `factor`.
    pub fn scale_prices(&self, factor: f64) -> PanelData {
        PanelData {
            dates: self.dates.clone(),
            tickers: self.tickers.clone(),
            cells: self.cells.iter().map(|c| c.map(|b| b.scaled(factor))).collect(),
        }
    }
}

fn parse_field(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64, DataError> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse::<f64>().map_err(|_| DataError::Malformed {
        line,
        msg: format!("bad {name} value {raw:?}"),
    })
}

/// Parses a `date,ticker,open,high,low,close,adj_close,volume` CSV (columns
/// located by header name). Tickers are sorted; missing cells stay empty.
pub fn load_ohlcv(path: impl AsRef<Path>) -> Result<PanelData, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DataError::Empty(format!("{} has no header", path.display())));
    }
    let mut cols = [0usize; 8];
    for (slot, name) in cols.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| DataError::Malformed {
                line: 1,
                msg: format!("missing column {name:?}"),
            })?;
    }

    let mut rows: BTreeMap<(NaiveDate, String), Bar> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let date_raw = rec.get(cols[0]).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_raw, "%Y-%m-%d").map_err(|_| DataError::Malformed {
            line,
            msg: format!("bad date {date_raw:?}"),
        })?;
        let ticker = rec.get(cols[1]).unwrap_or("").to_string();
        if ticker.is_empty() {
            return Err(DataError::Malformed {
                line,
                msg: "empty ticker".into(),
            });
        }
        let bar = Bar {
            open: parse_field(&rec, cols[2], "open", line)?,
            high: parse_field(&rec, cols[3], "high", line)?,
            low: parse_field(&rec, cols[4], "low", line)?,
            close: parse_field(&rec, cols[5], "close", line)?,
            adj_close: parse_field(&rec, cols[6], "adj_close", line)?,
            volume: parse_field(&rec, cols[7], "volume", line)?,
        };
        bar.validate().map_err(|e| DataError::Malformed {
            line,
            msg: format!("invalid bar for ({date}, {ticker}): {e}"),
        })?;
        if rows.insert((date, ticker.clone()), bar).is_some() {
            return Err(DataError::Duplicate { line, date, ticker });
        }
    }
    if rows.is_empty() {
        return Err(DataError::Empty(format!("{} has no data rows", path.display())));
    }

    let dates: Vec<NaiveDate> = rows.keys().map(|(d, _)| *d).collect::<BTreeSet<_>>().into_iter().collect();
    let tickers: Vec<String> = rows.keys().map(|(_, t)| t.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let date_idx: BTreeMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let ticker_idx: BTreeMap<&str, usize> = tickers.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut cells = vec![None; dates.len() * tickers.len()];
    for ((d, t), bar) in &rows {
        cells[date_idx[d] * tickers.len() + ticker_idx[t.as_str()]] = Some(*bar);
    }
    Ok(PanelData { dates, tickers, cells })
}

/// Writes the panel in the same layout [`load_ohlcv`] reads.
pub fn write_ohlcv(panel: &PanelData, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for (d, date) in panel.dates.iter().enumerate() {
        for (k, ticker) in panel.tickers.iter().enumerate() {
            if let Some(b) = panel.bar(d, k) {
                w.write_record([
                    date.format("%Y-%m-%d").to_string(),
                    ticker.clone(),
                    b.open.to_string(),
                    b.high.to_string(),
                    b.low.to_string(),
                    b.close.to_string(),
                    b.adj_close.to_string(),
                    b.volume.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Output of [`align_and_split`].
#[derive(Clone, Debug)]
pub struct Split {
    pub train: PanelData,
    pub test: PanelData,
    /// Tickers removed for missing at least one date in either range.
    pub dropped: Vec<String>,
}

/// Cuts the panel into non-overlapping train and test ranges, dropping every
/// asset that lacks a bar on any date inside either range.
pub fn align_and_split(panel: &PanelData, train: DateRange, test: DateRange) -> Result<Split, DataError> {
    if train.start > train.end || test.start > test.end {
        return Err(DataError::Contract("date range start after end".into()));
    }
    if train.end >= test.start {
        return Err(DataError::Contract(format!(
            "train range must end before test range starts ({} >= {})",
            train.end, test.start
        )));
    }
    let days: Vec<usize> = (0..panel.n_dates())
        .filter(|&d| train.contains(panel.dates[d]) || test.contains(panel.dates[d]))
        .collect();
    let n = panel.n_assets();
    let (keep, dropped): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&k| days.iter().all(|&d| panel.cells[d * n + k].is_some()));
    let pick = |range: DateRange| -> Vec<usize> {
        days.iter().copied().filter(|&d| range.contains(panel.dates[d])).collect()
    };
    let (train_days, test_days) = (pick(train), pick(test));
    if keep.is_empty() || train_days.is_empty() || test_days.is_empty() {
        return Err(DataError::Empty(format!(
            "split leaves {} assets, {} train days, {} test days",
            keep.len(),
            train_days.len(),
            test_days.len()
        )));
    }
    Ok(Split {
        train: panel.select(&train_days, &keep),
        test: panel.select(&test_days, &keep),
        dropped: dropped.into_iter().map(|k| panel.tickers[k].clone()).collect(),
    })
}

/// Number of cells perturbed for a given fraction: `⌊fraction × cells⌋`.
pub fn outlier_count(fraction: f64, cells: usize) -> usize {
    // The tolerance absorbs binary representation error in decimal fractions
    // such as 0.29 × 100.
    ((fraction * cells as f64) + 1e-9).floor() as usize
}

/// Scales the OHLC (and adjusted close) of `⌊fraction × cells⌋` uniformly
/// chosen (date, ticker) cells by a factor drawn from `factors`.
pub fn inject_outliers(panel: &PanelData, fraction: f64, factors: &[f64], seed: u64) -> Result<PanelData, DataError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DataError::Contract(format!("outlier fraction {fraction} outside [0, 1]")));
    }
    if factors.is_empty() {
        return Err(DataError::Contract("outlier factor set is empty".into()));
    }
    if factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(DataError::Contract("outlier factors must be positive".into()));
    }
    let present: Vec<usize> = (0..panel.cells.len()).filter(|&i| panel.cells[i].is_some()).collect();
    let count = outlier_count(fraction, present.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = panel.clone();
    let mut chosen: Vec<usize> = sample(&mut rng, present.len(), count).into_iter().map(|i| present[i]).collect();
    chosen.sort_unstable();
    for cell in chosen {
        let factor = factors[rng.random_range(0..factors.len())];
        out.cells[cell] = out.cells[cell].map(|b| b.shocked(factor));
    }
    Ok(out)
}

/// Parameters of a geometric random-walk market.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_assets: usize,
    pub n_days: usize,
    /// Per-asset expected daily return.
    pub drift: Vec<f64>,
    /// Per-asset daily log-return standard deviation.
    pub volatility: Vec<f64>,
    pub seed: u64,
}

impl SynthSpec {
    /// Same drift and volatility for every asset.
    pub fn uniform(n_assets: usize, n_days: usize, drift: f64, volatility: f64, seed: u64) -> Self {
        SynthSpec {
            n_assets,
            n_days,
            drift: vec![drift; n_assets],
            volatility: vec![volatility; n_assets],
            seed,
        }
    }
}

pub const SYNTH_START_PRICE: f64 = 100.0;

/// Business days (Mon–Fri) starting at 2000-01-03.
pub fn business_days(count: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Generates `close_t = close_{t−1} · (1 + drift) · exp(σz − σ²/2)` per asset,
/// with opens at the previous close and highs/lows spread around the body.
pub fn synth_market(spec: &SynthSpec) -> Result<PanelData, DataError> {
    let n = spec.n_assets;
    if n == 0 || spec.n_days < 2 {
        return Err(DataError::Contract("synthetic market needs >= 1 asset and >= 2 days".into()));
    }
    if spec.drift.len() != n || spec.volatility.len() != n {
        return Err(DataError::Contract("drift/volatility length must equal asset count".into()));
    }
    if spec.volatility.iter().any(|v| !(*v >= 0.0)) {
        return Err(DataError::Contract("volatility must be non-negative".into()));
    }
    if spec.drift.iter().any(|m| !(*m > -1.0)) {
        return Err(DataError::Contract("drift must exceed -1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut prev = vec![SYNTH_START_PRICE; n];
    let mut cells = Vec::with_capacity(n * spec.n_days);
    for t in 0..spec.n_days {
        for k in 0..n {
            let (mu, sigma) = (spec.drift[k], spec.volatility[k]);
            let z: f64 = rng.sample(StandardNormal);
            let wick_hi: f64 = rng.sample::<f64, _>(StandardNormal).abs();
            let wick_lo: f64 = rng.sample::<f64, _>(StandardNormal).abs();
            let vol_noise: f64 = rng.random_range(0.5..1.5);
            let open = prev[k];
            let close = if t == 0 {
                open
            } else {
                open * (1.0 + mu) * (sigma * z - 0.5 * sigma * sigma).exp()
            };
            let high = open.max(close) * (1.0 + 0.5 * sigma * wick_hi);
            let low = open.min(close) * (1.0 - (0.5 * sigma * wick_lo).min(0.5));
            cells.push(Some(Bar {
                open,
                high,
                low,
                close,
                adj_close: close,
                volume: 1.0e6 * vol_noise,
            }));
            prev[k] = close;
        }
    }
    let tickers = (0..n).map(|k| format!("SYN{k:02}")).collect();
    PanelData::new(business_days(spec.n_days), tickers, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const TWO_BY_THREE: &str = "date,ticker,open,high,low,close,adj_close,volume
2020-01-02,BBB,10,11,9,10.5,10.5,100
2020-01-02,AAA,20,21,19,20.5,20.5,200
2020-01-03,AAA,20.5,22,20,21,21,210
2020-01-03,BBB,10.5,11,10,10.8,10.8,110
2020-01-06,AAA,21,21.5,20.1,21.2,21.2,220
2020-01-06,BBB,10.8,11.2,10.4,11,11,120
";

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn loads_well_formed_file() {
        let f = write_tmp(TWO_BY_THREE);
        let p = load_ohlcv(f.path()).unwrap();
        assert_eq!(p.record_count(), 6);
        assert_eq!(p.tickers(), &["AAA".to_string(), "BBB".to_string()]);
        assert_eq!(p.n_dates(), 3);
        assert!(p.is_complete());
        assert_eq!(p.bar(0, 1).unwrap().close, 10.5);
    }

    #[test]
    fn rejects_low_above_high_with_line() {
        let bad = TWO_BY_THREE.replace("2020-01-03,AAA,20.5,22,20,", "2020-01-03,AAA,20.5,22,23,");
        let f = write_tmp(&bad);
        match load_ohlcv(f.path()) {
            Err(DataError::Malformed { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("2020-01-03") && msg.contains("AAA"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_empty_and_duplicate() {
        let f = write_tmp("");
        assert!(matches!(load_ohlcv(f.path()), Err(DataError::Empty(_))));
        let f = write_tmp("date,ticker,open,high,low,close,adj_close,volume\n");
        assert!(matches!(load_ohlcv(f.path()), Err(DataError::Empty(_))));
        let dup = format!("{TWO_BY_THREE}2020-01-06,BBB,10.8,11.2,10.4,11,11,120\n");
        let f = write_tmp(&dup);
        match load_ohlcv(f.path()) {
            Err(DataError::Duplicate { ticker, date, .. }) => {
                assert_eq!(ticker, "BBB");
                assert_eq!(date, d("2020-01-06"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_ohlcv("/nonexistent/prices.csv").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/prices.csv"));
    }

    #[test]
    fn split_rejects_overlap_and_drops_late_listing() {
        let spec = SynthSpec::uniform(3, 30, 0.0, 0.01, 1);
        let full = synth_market(&spec).unwrap();
        let dates = full.dates().to_vec();
        // ranges sharing a date
        let r1 = DateRange::new(dates[0], dates[10]);
        let r2 = DateRange::new(dates[10], dates[20]);
        assert!(align_and_split(&full, r1, r2).is_err());

        // asset 1 starts trading on day 5
        let mut cells = full.cells.clone();
        for day in 0..5 {
            cells[day * 3 + 1] = None;
        }
        let ragged = PanelData::new(dates.clone(), full.tickers().to_vec(), cells).unwrap();
        let split = align_and_split(
            &ragged,
            DateRange::new(dates[0], dates[14]),
            DateRange::new(dates[15], dates[29]),
        )
        .unwrap();
        assert_eq!(split.dropped, vec!["SYN01".to_string()]);
        assert_eq!(split.train.n_assets(), 2);
        assert_eq!(split.train.n_dates(), 15);
        assert_eq!(split.test.n_dates(), 15);
        assert!(split.train.is_complete() && split.test.is_complete());

        // outside the train range the late asset is fine
        let split = align_and_split(
            &ragged,
            DateRange::new(dates[5], dates[14]),
            DateRange::new(dates[15], dates[29]),
        )
        .unwrap();
        assert!(split.dropped.is_empty());
    }

    #[test]
    fn table_one_dataset_split() {
        // one synthetic bar per business day from 2016 to 2019
        let days: Vec<NaiveDate> = business_days(6000)
            .into_iter()
            .filter(|x| x.year() >= 2016 && x.year() <= 2019)
            .collect();
        let n = days.len();
        let bar = Bar { open: 1.0, high: 1.0, low: 1.0, close: 1.0, adj_close: 1.0, volume: 1.0 };
        let p = PanelData::new(days, vec!["X".into()], vec![Some(bar); n]).unwrap();
        let s = align_and_split(
            &p,
            DateRange::new(d("2016-01-01"), d("2018-12-31")),
            DateRange::new(d("2019-01-01"), d("2019-12-31")),
        )
        .unwrap();
        assert_eq!(s.train.dates().first().unwrap().year(), 2016);
        assert_eq!(s.train.dates().last().unwrap().year(), 2018);
        assert!(s.test.dates().iter().all(|x| x.year() == 2019));
        assert_eq!(s.train.n_dates() + s.test.n_dates(), n);
    }

    #[test]
    fn outliers_identity_and_errors() {
        let p = synth_market(&SynthSpec::uniform(4, 50, 0.0, 0.02, 3)).unwrap();
        assert_eq!(inject_outliers(&p, 0.0, &DEFAULT_OUTLIER_FACTORS, 9).unwrap(), p);
        assert!(inject_outliers(&p, 0.1, &[], 9).is_err());
        assert!(inject_outliers(&p, 1.5, &DEFAULT_OUTLIER_FACTORS, 9).is_err());
    }

    #[test]
    fn outlier_count_floors() {
        assert_eq!(outlier_count(0.05, 200), 10);
        assert_eq!(outlier_count(0.05, 199), 9);
        assert_eq!(outlier_count(0.29, 100), 29);
        assert_eq!(outlier_count(0.1, 30), 3);
    }

    #[test]
    fn synth_degenerate_walks() {
        let flat = synth_market(&SynthSpec::uniform(2, 20, 0.0, 0.0, 5)).unwrap();
        for day in 0..20 {
            for k in 0..2 {
                let b = flat.bar(day, k).unwrap();
                assert_eq!((b.open, b.high, b.low, b.close), (100.0, 100.0, 100.0, 100.0));
            }
        }
        let up = synth_market(&SynthSpec::uniform(1, 300, 0.001, 0.0, 5)).unwrap();
        for t in 0..300 {
            let expected = SYNTH_START_PRICE * 1.001f64.powi(t as i32);
            let got = up.bar(t, 0).unwrap().close;
            assert!((got - expected).abs() / expected < 1e-12, "t {t}");
        }
        assert!(synth_market(&SynthSpec::uniform(2, 20, 0.0, -0.1, 5)).is_err());
        assert!(synth_market(&SynthSpec::uniform(0, 20, 0.0, 0.1, 5)).is_err());
        assert!(synth_market(&SynthSpec::uniform(1, 1, 0.0, 0.1, 5)).is_err());
    }

    #[test]
    fn business_days_skip_weekends() {
        let days = business_days(10);
        assert!(days.iter().all(|x| !matches!(x.weekday(), Weekday::Sat | Weekday::Sun)));
        assert_eq!(days[5], d("2000-01-10"));
    }
}
