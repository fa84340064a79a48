//! Command-line runs: the TOML run configuration, data loading and the
//! `ingest`, `train`, `backtest`, `ablate` and `report` subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest_eval::{
    ablation_report_with, compute_metrics, equity_csv, metrics_csv, run_backtest, svg_line_plot, weights_csv,
    AblationSpec, ArmSetup, ArmStatus, BaselineKind, EvalError, MetricsConfig, MetricsRow, Strategy,
};
use crate::indicators::{prepare_split, test_features, FeatureNormalizer, IndicatorConfig, IndicatorError};
use crate::market_data::{
    align_and_split, load_ohlcv, synth_market, write_ohlcv, DataError, DateRange, PanelData, SynthSpec,
};
use crate::migt_policy::{load_checkpoint, save_checkpoint, AttentionConfig, PolicyConfig, PolicyError, Variant};
use crate::portfolio_env::{EnvConfig, EnvError};
use crate::ppo_trainer::{train, PpoConfig, TrainError};
use crate::tensor::Tensor;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_DIVERGED: u8 = 2;
pub const EXIT_IO: u8 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const PANEL_CACHE_FILE: &str = "panel.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const REPORT_FILE: &str = "report.txt";

const NORM_MEAN: &str = "normalizer.mean";
const NORM_STD: &str = "normalizer.std";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Indicator(#[from] IndicatorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("all {0} ablation arms diverged")]
    AllDiverged(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 0 success, 1 validation, 2 runtime divergence, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_VALIDATION,
            CliError::Data(e) => data_code(e),
            CliError::Indicator(IndicatorError::Data(e)) => data_code(e),
            CliError::Indicator(_) => EXIT_VALIDATION,
            CliError::Env(e) => env_code(e),
            CliError::Policy(e) => policy_code(e),
            CliError::Train(e) => train_code(e),
            CliError::Eval(e) => eval_code(e),
            CliError::AllDiverged(_) => EXIT_DIVERGED,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Io { .. } => EXIT_IO,
        DataError::Csv { source, .. } if source.is_io_error() => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn env_code(e: &EnvError) -> u8 {
    match e {
        EnvError::Io { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn policy_code(e: &PolicyError) -> u8 {
    match e {
        PolicyError::Io { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Diverged { .. } | TrainError::NonFiniteRatio { .. } => EXIT_DIVERGED,
        TrainError::Io { .. } => EXIT_IO,
        TrainError::Env(e) => env_code(e),
        TrainError::Policy(e) => policy_code(e),
        _ => EXIT_VALIDATION,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Io { .. } => EXIT_IO,
        EvalError::Env(e) => env_code(e),
        EvalError::Policy(e) => policy_code(e),
        EvalError::Train(e) => train_code(e),
        EvalError::Data(e) => data_code(e),
        EvalError::Indicator(IndicatorError::Data(e)) => data_code(e),
        _ => EXIT_VALIDATION,
    }
}

/// Geometric random-walk market used when no data file is configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_assets: usize,
    pub n_days: usize,
    /// One value for every asset, or one per asset.
    pub drift: Vec<f64>,
    /// One value for every asset, or one per asset.
    pub volatility: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_assets: 3,
            n_days: 750,
            drift: vec![0.0005],
            volatility: vec![0.01],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self) -> Result<SynthSpec, CliError> {
        let per_asset = |field: &str, v: &[f64]| -> Result<Vec<f64>, CliError> {
            match v.len() {
                1 => Ok(vec![v[0]; self.n_assets]),
                n if n == self.n_assets => Ok(v.to_vec()),
                n => Err(CliError::Config(format!(
                    "data.synthetic.{field}: expected 1 or {} values, got {n}",
                    self.n_assets
                ))),
            }
        };
        Ok(SynthSpec {
            n_assets: self.n_assets,
            n_days: self.n_days,
            drift: per_asset("drift", &self.drift)?,
            volatility: per_asset("volatility", &self.volatility)?,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// OHLCV CSV; the synthetic market is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(with = "toml_date", skip_serializing_if = "Option::is_none")]
    pub train_start: Option<NaiveDate>,
    #[serde(with = "toml_date", skip_serializing_if = "Option::is_none")]
    pub train_end: Option<NaiveDate>,
    #[serde(with = "toml_date", skip_serializing_if = "Option::is_none")]
    pub test_start: Option<NaiveDate>,
    #[serde(with = "toml_date", skip_serializing_if = "Option::is_none")]
    pub test_end: Option<NaiveDate>,
    /// Leading share of days used for training when no date ranges are set.
    pub train_fraction: f64,
    pub synthetic: SynthConfig,
}

/// Optional dates written as bare TOML local dates.
mod toml_date {
    use chrono::{Datelike, NaiveDate};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};
    use toml::value::{Date, Datetime};

    pub fn serialize<S: Serializer>(d: &Option<NaiveDate>, s: S) -> Result<S::Ok, S::Error> {
        d.map(|d| Datetime {
            date: Some(Date {
                year: d.year() as u16,
                month: d.month() as u8,
                day: d.day() as u8,
            }),
            time: None,
            offset: None,
        })
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveDate>, D::Error> {
        let Some(dt) = Option::<Datetime>::deserialize(d)? else {
            return Ok(None);
        };
        match (dt.date, dt.time, dt.offset) {
            (Some(x), None, None) => NaiveDate::from_ymd_opt(x.year.into(), x.month.into(), x.day.into())
                .map(Some)
                .ok_or_else(|| D::Error::custom(format!("invalid date {dt}"))),
            _ => Err(D::Error::custom(format!("expected a date like 2020-01-31, got {dt}"))),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            train_start: None,
            train_end: None,
            test_start: None,
            test_end: None,
            train_fraction: 0.75,
            synthetic: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    fn ranges(&self) -> Result<Option<(DateRange, DateRange)>, CliError> {
        match (self.train_start, self.train_end, self.test_start, self.test_end) {
            (None, None, None, None) => Ok(None),
            (Some(a), Some(b), Some(c), Some(d)) => Ok(Some((DateRange::new(a, b), DateRange::new(c, d)))),
            _ => Err(CliError::Config(
                "data: set all of train_start, train_end, test_start, test_end or none".into(),
            )),
        }
    }
}

/// Everything a run depends on besides input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required for training; also the PPO seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub data: DataConfig,
    pub indicators: IndicatorConfig,
    pub env: EnvConfig,
    pub attention: AttentionConfig,
    pub ppo: PpoConfig,
    pub metrics: MetricsConfig,
    pub ablation: AblationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: PathBuf::from("runs"),
            variant: Variant::Full,
            data: DataConfig::default(),
            indicators: IndicatorConfig::default(),
            env: EnvConfig::default(),
            attention: AttentionConfig::default(),
            ppo: PpoConfig::default(),
            metrics: MetricsConfig::default(),
            ablation: AblationSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies command-line overrides and copies the run seed into the PPO
    /// config.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        if let Some(s) = self.seed {
            self.ppo.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.indicators.validate()?;
        self.env.validate()?;
        self.attention.validate()?;
        self.ppo.validate()?;
        self.metrics.validate()?;
        self.data.ranges()?;
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Config(format!("data.train_fraction: must be in (0, 1), got {f}")));
        }
        if self.data.path.is_none() {
            self.data.synthetic.spec()?;
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("seed: missing; set `seed` in the config or pass --seed".into()))
    }
}

/// Clean train and test panels over the same assets.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: PanelData,
    pub test: PanelData,
    pub dropped: Vec<String>,
}

/// Loads the configured panel and splits it into train and test.
pub fn load_data(config: &DataConfig) -> Result<RunData, CliError> {
    let panel = match &config.path {
        Some(p) => load_ohlcv(p)?,
        None => synth_market(&config.synthetic.spec()?)?,
    };
    if let Some((train, test)) = config.ranges()? {
        let split = align_and_split(&panel, train, test)?;
        return Ok(RunData {
            train: split.train,
            test: split.test,
            dropped: split.dropped,
        });
    }
    let (panel, dropped) = panel.drop_incomplete();
    if panel.n_assets() == 0 {
        return Err(DataError::Empty("no asset has a bar on every date".into()).into());
    }
    let cut = (panel.n_dates() as f64 * config.train_fraction).floor() as usize;
    if cut == 0 || cut >= panel.n_dates() {
        return Err(CliError::Config(format!(
            "data.train_fraction {} leaves an empty split of {} days",
            config.train_fraction,
            panel.n_dates()
        )));
    }
    Ok(RunData {
        train: panel.slice_days(0, cut),
        test: panel.slice_days(cut, panel.n_dates()),
        dropped,
    })
}

#[derive(Debug, Parser)]
#[command(name = "migt", version, about = "Gated instance attention portfolio agent")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also write SVG equity plots.
    #[arg(long, global = true)]
    pub plot: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an OHLCV file and cache the aligned panel.
    Ingest(IngestArgs),
    /// Train a policy and write the checkpoint, training log and resolved config.
    Train,
    /// Backtest a checkpoint and baselines over the test period.
    Backtest(BacktestArgs),
    /// Train and evaluate every configured ablation arm.
    Ablate,
    /// Summarize the result files in the output directory.
    Report,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// OHLCV CSV; defaults to `data.path` from the config.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    /// Policy checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Baseline strategy; repeatable.
    #[arg(long = "baseline")]
    pub baselines: Vec<BaselineKind>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let config = base.resolve(cli.seed, cli.out.clone());
    config.validate()?;
    match &cli.command {
        Command::Ingest(args) => cmd_ingest(&config, args),
        Command::Train => cmd_train(&config),
        Command::Backtest(args) => cmd_backtest(&config, args, cli.plot),
        Command::Ablate => cmd_ablate(&config),
        Command::Report => cmd_report(&config, cli.plot),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn warn_dropped(dropped: &[String]) {
    for t in dropped {
        eprintln!("warning: dropped {t}: missing bars");
    }
}

pub fn cmd_ingest(config: &RunConfig, args: &IngestArgs) -> Result<(), CliError> {
    let input = args
        .input
        .as_ref()
        .or(config.data.path.as_ref())
        .ok_or_else(|| CliError::Config("ingest needs an input file or data.path".into()))?;
    let (panel, dropped) = load_ohlcv(input)?.drop_incomplete();
    warn_dropped(&dropped);
    if panel.n_assets() == 0 {
        return Err(DataError::Empty("no asset has a bar on every date".into()).into());
    }
    let dates = panel.dates();
    println!(
        "{} tickers, {} days ({} to {})",
        panel.n_assets(),
        panel.n_dates(),
        dates[0],
        dates[dates.len() - 1]
    );
    create_dir(&config.out_dir)?;
    write_ohlcv(&panel, config.out_dir.join(PANEL_CACHE_FILE))?;
    Ok(())
}

fn policy_config(config: &RunConfig, n_assets: usize, n_features: usize) -> PolicyConfig {
    PolicyConfig {
        n_assets,
        channels: n_features + 2,
        attention: config.attention.clone(),
        variant: config.variant,
    }
}

fn normalizer_extras(n: &FeatureNormalizer) -> Result<Vec<(String, Tensor)>, CliError> {
    let shape = vec![n.n_assets, n.n_features];
    Ok(vec![
        (NORM_MEAN.to_string(), Tensor::new(shape.clone(), n.mean.clone()).map_err(PolicyError::from)?),
        (NORM_STD.to_string(), Tensor::new(shape, n.std.clone()).map_err(PolicyError::from)?),
    ])
}

fn normalizer_from_extras(
    extras: &std::collections::BTreeMap<String, Tensor>,
    n_assets: usize,
    n_features: usize,
) -> Result<FeatureNormalizer, CliError> {
    let get = |name: &str| -> Result<Vec<f64>, CliError> {
        let t = extras
            .get(name)
            .ok_or_else(|| PolicyError::Mismatch(format!("checkpoint has no {name}")))?;
        if t.shape() != [n_assets, n_features] {
            return Err(PolicyError::Mismatch(format!(
                "{name} has shape {:?}, panel needs [{n_assets}, {n_features}]",
                t.shape()
            ))
            .into());
        }
        Ok(t.data().to_vec())
    };
    Ok(FeatureNormalizer {
        mean: get(NORM_MEAN)?,
        std: get(NORM_STD)?,
        n_assets,
        n_features,
    })
}

pub fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    config.require_seed()?;
    let data = load_data(&config.data)?;
    warn_dropped(&data.dropped);
    let out = &config.out_dir;
    create_dir(out)?;
    write_file(&out.join(CONFIG_ECHO_FILE), &config.to_toml())?;
    let split = prepare_split(&data.train, &data.train, &data.test, &config.indicators)?;
    let policy = policy_config(config, split.train.n_assets(), split.train.n_features());
    let extras = normalizer_extras(&split.normalizer)?;
    match train(Arc::new(split.train), &config.env, &policy, &config.ppo) {
        Ok(outcome) => {
            outcome.log.write_csv(out.join(TRAINING_LOG_FILE))?;
            save_checkpoint(out.join(CHECKPOINT_FILE), &outcome.params, &extras)?;
            let steps = outcome.log.rows.last().map_or(0, |r| r.steps);
            println!(
                "trained {} updates, {steps} steps; artifacts in {}",
                outcome.log.rows.len(),
                out.display()
            );
            Ok(())
        }
        Err(TrainError::Diverged {
            update,
            reason,
            last_good,
            log,
        }) => {
            log.write_csv(out.join(TRAINING_LOG_FILE))?;
            save_checkpoint(out.join(CHECKPOINT_FILE), &last_good, &extras)?;
            Err(TrainError::Diverged {
                update,
                reason,
                last_good,
                log,
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_backtest(config: &RunConfig, args: &BacktestArgs, plot: bool) -> Result<(), CliError> {
    let data = load_data(&config.data)?;
    warn_dropped(&data.dropped);
    let default_checkpoint = config.out_dir.join(CHECKPOINT_FILE);
    let (checkpoint, baselines) = if args.checkpoint.is_none() && args.baselines.is_empty() {
        let ckpt = default_checkpoint.exists().then_some(default_checkpoint);
        (ckpt, BaselineKind::ALL.to_vec())
    } else {
        (args.checkpoint.clone(), args.baselines.clone())
    };
    let split = prepare_split(&data.train, &data.train, &data.test, &config.indicators)?;
    let baseline_panel = Arc::new(split.test);
    let mut runs: Vec<(Strategy, Arc<_>)> = Vec::new();
    if let Some(path) = &checkpoint {
        let (n, f) = (baseline_panel.n_assets(), baseline_panel.n_features());
        let policy = policy_config(config, n, f);
        let (params, extras) = load_checkpoint(path, &policy)?;
        let normalizer = normalizer_from_extras(&extras, n, f)?;
        let (panel, _) = test_features(&data.train, &data.test, &normalizer, &config.indicators)?;
        let strategy = Strategy::Policy {
            params: Box::new(params),
            config: policy,
        };
        runs.push((strategy, Arc::new(panel)));
    }
    for kind in baselines {
        runs.push((Strategy::Baseline(kind), baseline_panel.clone()));
    }
    let out = &config.out_dir;
    create_dir(out)?;
    let mut rows = Vec::new();
    for (strategy, panel) in runs {
        let name = strategy.name();
        let result = run_backtest(&strategy, panel, &config.env, Some(split.test_start))?;
        write_file(&out.join(format!("equity_{name}.csv")), &equity_csv(&result.curve))?;
        write_file(&out.join(format!("weights_{name}.csv")), &weights_csv(&result))?;
        if plot {
            let series = [(name.clone(), result.curve.value_ratios())];
            let svg = svg_line_plot(&name, &result.curve.dates, &series);
            write_file(&out.join(format!("equity_{name}.svg")), &svg)?;
        }
        rows.push(MetricsRow {
            strategy: name,
            dataset: "test".into(),
            metrics: compute_metrics(&result.curve, &config.metrics),
        });
    }
    let table = metrics_csv(&rows);
    write_file(&out.join(METRICS_FILE), &table)?;
    print!("{table}");
    Ok(())
}

fn arm_stem(variant: Variant, seed: u64, fraction: f64) -> String {
    format!("{}_seed{seed}_frac{fraction}", variant.name())
}

pub fn cmd_ablate(config: &RunConfig) -> Result<(), CliError> {
    let data = load_data(&config.data)?;
    warn_dropped(&data.dropped);
    let out = &config.out_dir;
    let arms_dir = out.join("arms");
    create_dir(&arms_dir)?;
    write_file(&out.join(CONFIG_ECHO_FILE), &config.to_toml())?;
    let setup = ArmSetup {
        train: &data.train,
        test: &data.test,
        indicators: &config.indicators,
        env: &config.env,
        attention: &config.attention,
        ppo: &config.ppo,
        metrics: &config.metrics,
    };
    let report = ablation_report_with(&setup, &config.ablation, |arm| {
        let row = &arm.row;
        let stem = arm_stem(row.variant, row.seed, row.outlier_fraction);
        if let ArmStatus::Diverged(reason) = &row.status {
            eprintln!("warning: arm {stem} diverged: {reason}");
        }
        let extras = normalizer_extras(&arm.normalizer).map_err(|e| match e {
            CliError::Policy(p) => EvalError::Policy(p),
            other => EvalError::Config(other.to_string()),
        })?;
        save_checkpoint(arms_dir.join(format!("{stem}.checkpoint.txt")), &arm.params, &extras)?;
        Ok(())
    })?;
    write_file(&out.join(ABLATION_FILE), &report.table_csv())?;
    write_file(&out.join(CONVERGENCE_FILE), &report.convergence_csv())?;
    print!("{}", report.table_csv());
    if report.succeeded() == 0 {
        return Err(CliError::AllDiverged(report.rows.len()));
    }
    Ok(())
}

fn parse_equity(path: &Path) -> Result<(Vec<NaiveDate>, Vec<f64>), CliError> {
    let text = read_file(path)?;
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || CliError::Config(format!("{} line {}: expected date,value_ratio", path.display(), i + 1));
        let (d, v) = line.split_once(',').ok_or_else(bad)?;
        dates.push(d.parse().map_err(|_| bad())?);
        values.push(v.parse().map_err(|_| bad())?);
    }
    Ok((dates, values))
}

fn aligned_table(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn cmd_report(config: &RunConfig, plot: bool) -> Result<(), CliError> {
    let out = &config.out_dir;
    let mut report = String::new();
    for (title, file) in [("metrics", METRICS_FILE), ("ablation", ABLATION_FILE)] {
        let path = out.join(file);
        if path.exists() {
            report.push_str(&format!("== {title} ==\n"));
            report.push_str(&aligned_table(&read_file(&path)?));
            report.push('\n');
        }
    }
    let entries = fs::read_dir(out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    let mut equity: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let stem = name.strip_prefix("equity_")?.strip_suffix(".csv")?.to_string();
            Some((stem, p))
        })
        .collect();
    equity.sort();
    if report.is_empty() && equity.is_empty() {
        return Err(CliError::Config(format!("no result files in {}", out.display())));
    }
    if plot && !equity.is_empty() {
        let mut series = Vec::new();
        let mut axis: Option<Vec<NaiveDate>> = None;
        for (name, path) in &equity {
            let (dates, values) = parse_equity(path)?;
            match &axis {
                Some(a) if *a != dates => {
                    return Err(CliError::Config(format!("{} has a different date axis", path.display())))
                }
                Some(_) => {}
                None => axis = Some(dates),
            }
            series.push((name.clone(), values));
        }
        let svg = svg_line_plot("equity", axis.as_deref().unwrap_or(&[]), &series);
        write_file(&out.join("equity.svg"), &svg)?;
    }
    write_file(&out.join(REPORT_FILE), &report)?;
    print!("{report}");
    Ok(())
}
