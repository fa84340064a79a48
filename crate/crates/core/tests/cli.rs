use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use migt_core::cli::RunConfig;
use migt_core::market_data::{synth_market, write_ohlcv, SynthSpec};

const TINY: &str = r#"
seed = 7

[data.synthetic]
n_assets = 2
n_days = 200
drift = [0.001, 0.0]
volatility = [0.005]

[env]
window = 10

[attention]
d_model = 16
heads = 2
ff_dim = 16
memory_len = 16

[ppo]
total_steps = 2000
rollout_steps = 250
learning_rate = 0.003

[ablation]
eval_every = 0
"#;

fn migt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_migt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run migt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.toml", TINY);
    dir
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn tiny_training_run_writes_artifacts_quickly() {
    let dir = tiny_dir();
    let start = Instant::now();
    let o = migt(dir.path(), &["--config", "tiny.toml", "--out", "a", "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(300));
    for f in ["checkpoint.txt", "training_log.csv", "config.toml"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    let log = read(dir.path().join("a/training_log.csv"));
    assert!(log.starts_with("update,steps,mean_reward,loss,clip_fraction,approx_kl\n"));
    assert_eq!(log.lines().count(), 1 + 8);
}

#[test]
fn reruns_and_echo_reruns_are_byte_identical() {
    let dir = tiny_dir();
    assert_eq!(code(&migt(dir.path(), &["--config", "tiny.toml", "--out", "a", "train"])), 0);
    assert_eq!(code(&migt(dir.path(), &["--config", "tiny.toml", "--out", "b", "train"])), 0);
    assert_eq!(code(&migt(dir.path(), &["--config", "a/config.toml", "--out", "c", "train"])), 0);
    for f in ["training_log.csv", "checkpoint.txt"] {
        let a = read(dir.path().join("a").join(f));
        assert_eq!(a, read(dir.path().join("b").join(f)), "{f}");
        assert_eq!(a, read(dir.path().join("c").join(f)), "{f}");
    }
    for run in ["a", "b"] {
        let o = migt(dir.path(), &["--config", "tiny.toml", "--out", run, "backtest"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["metrics.csv", "equity_migt_full.csv", "weights_migt_full.csv", "weights_best.csv"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn resolved_config_echo_round_trips() {
    let dir = tiny_dir();
    assert_eq!(code(&migt(dir.path(), &["--config", "tiny.toml", "--seed", "3", "--out", "a", "train"])), 0);
    let echoed = RunConfig::from_toml(&read(dir.path().join("a/config.toml"))).unwrap();
    let expected = RunConfig::from_toml(TINY)
        .unwrap()
        .resolve(Some(3), Some(PathBuf::from("a")));
    assert_eq!(echoed, expected);
    assert_eq!(echoed.ppo.seed, 3);
    assert_eq!(RunConfig::from_toml(&echoed.to_toml()).unwrap(), echoed);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tiny_dir();
    assert_eq!(code(&migt(dir.path(), &["--config", "tiny.toml", "--out", "a", "train"])), 0);
    assert_eq!(code(&migt(dir.path(), &["--config", "tiny.toml", "--seed", "8", "--out", "b", "train"])), 0);
    assert_ne!(read(dir.path().join("a/training_log.csv")), read(dir.path().join("b/training_log.csv")));
}

#[test]
fn invalid_clip_eps_is_rejected_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "eps.toml", &TINY.replace("[ppo]", "[ppo]\nclip_eps = 1.5"));
    let o = migt(dir.path(), &["--config", "eps.toml", "train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("clip_eps"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_and_missing_seed_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "typo.toml", &TINY.replace("[env]", "[env]\nwindw = 3"));
    let o = migt(dir.path(), &["--config", "typo.toml", "train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("windw"), "{}", stderr(&o));
    write_config(dir.path(), "noseed.toml", &TINY.replace("seed = 7", ""));
    let o = migt(dir.path(), &["--config", "noseed.toml", "train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
    assert_eq!(code(&migt(dir.path(), &["frobnicate"])), 1);
}

#[test]
fn missing_files_exit_with_io_code_and_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = migt(dir.path(), &["ingest", "absent.csv"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("absent.csv"));
    let o = migt(dir.path(), &["--config", "absent.toml", "train"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("absent.toml"));
}

#[test]
fn ingest_summarizes_and_caches_the_panel() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth_market(&SynthSpec::uniform(30, 756, 0.0003, 0.01, 5)).unwrap();
    write_ohlcv(&panel, dir.path().join("prices.csv")).unwrap();
    let o = migt(dir.path(), &["--out", "cache", "ingest", "prices.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("30 tickers, 756 days"), "{}", stdout(&o));
    assert_eq!(read(dir.path().join("cache/panel.csv")), read(dir.path().join("prices.csv")));
}

#[test]
fn ingest_warns_about_incomplete_assets() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth_market(&SynthSpec::uniform(3, 60, 0.0, 0.01, 1)).unwrap();
    write_ohlcv(&panel, dir.path().join("full.csv")).unwrap();
    let text = read(dir.path().join("full.csv"));
    let mut lines: Vec<&str> = text.lines().collect();
    let victim = lines.iter().position(|l| l.contains(",SYN01,")).unwrap();
    lines.remove(victim);
    fs::write(dir.path().join("gap.csv"), lines.join("\n") + "\n").unwrap();
    let o = migt(dir.path(), &["--out", "cache", "ingest", "gap.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("2 tickers, 60 days"), "{}", stdout(&o));
    assert!(stderr(&o).contains("SYN01"));
}

#[test]
fn ingest_rejects_duplicate_rows_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth_market(&SynthSpec::uniform(2, 10, 0.0, 0.01, 1)).unwrap();
    write_ohlcv(&panel, dir.path().join("p.csv")).unwrap();
    let text = read(dir.path().join("p.csv"));
    let row = text.lines().nth(3).unwrap().to_string();
    fs::write(dir.path().join("dup.csv"), format!("{text}{row}\n")).unwrap();
    let o = migt(dir.path(), &["ingest", "dup.csv"]);
    assert_eq!(code(&o), 1);
    let mut fields = row.split(',');
    let (date, ticker) = (fields.next().unwrap(), fields.next().unwrap());
    let err = stderr(&o);
    assert!(err.contains("duplicate") && err.contains(date) && err.contains(ticker), "{err}");
}

#[test]
fn trains_from_a_csv_with_date_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth_market(&SynthSpec::uniform(2, 200, 0.0005, 0.005, 2)).unwrap();
    write_ohlcv(&panel, dir.path().join("p.csv")).unwrap();
    let d = panel.dates();
    let config = TINY.replace(
        "[data.synthetic]",
        &format!(
            "[data]\npath = \"p.csv\"\ntrain_start = {}\ntrain_end = {}\ntest_start = {}\ntest_end = {}\n\n[data.synthetic]",
            d[0], d[149], d[150], d[199]
        ),
    );
    write_config(dir.path(), "csv.toml", &config);
    let o = migt(dir.path(), &["--config", "csv.toml", "--out", "a", "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echoed = RunConfig::from_toml(&read(dir.path().join("a/config.toml"))).unwrap();
    assert_eq!(echoed.data.train_end, Some(d[149]));
    assert_eq!(echoed, RunConfig::from_toml(&config).unwrap().resolve(None, Some("a".into())));
    let o = migt(dir.path(), &["--config", "csv.toml", "--out", "a", "backtest"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let equity = read(dir.path().join("a/equity_migt_full.csv"));
    assert_eq!(equity.lines().nth(1).unwrap(), format!("{},1", d[149]));
    assert_eq!(equity.lines().count(), 1 + 51);
}

#[test]
fn all_cash_backtest_has_zero_cumulative_return() {
    let dir = tiny_dir();
    let o = migt(dir.path(), &["--config", "tiny.toml", "--out", "a", "backtest", "--baseline", "all_cash"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = read(dir.path().join("a/metrics.csv"));
    let row = metrics.lines().nth(1).unwrap();
    assert!(row.starts_with("all_cash,test,0,"), "{row}");
    assert_eq!(metrics.lines().count(), 2);
    assert!(!dir.path().join("a/equity_all_cash.svg").exists());
}

#[test]
fn plot_flag_writes_one_svg_per_curve() {
    let dir = tiny_dir();
    let args = ["--config", "tiny.toml", "--out", "a", "--plot", "backtest", "--baseline", "best", "--baseline", "equal_weight"];
    let o = migt(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["best", "equal_weight"] {
        let svg = read(dir.path().join(format!("a/equity_{name}.svg")));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
    let o = migt(dir.path(), &["--config", "tiny.toml", "--out", "a", "--plot", "report"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("equal_weight"));
    assert!(dir.path().join("a/equity.svg").exists());
    assert!(dir.path().join("a/report.txt").exists());
}

#[test]
fn best_baseline_logs_one_hot_weights() {
    let dir = tiny_dir();
    let o = migt(dir.path(), &["--config", "tiny.toml", "--out", "a", "backtest", "--baseline", "best"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = read(dir.path().join("a/weights_best.csv"));
    let mut by_day: std::collections::BTreeMap<String, Vec<(String, f64)>> = Default::default();
    for line in log.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        by_day.entry(f[0].into()).or_default().push((f[1].into(), f[2].parse().unwrap()));
    }
    assert_eq!(by_day.len(), 50);
    for (day, cells) in &by_day {
        assert_eq!(cells.len(), 3, "{day}");
        assert_eq!(cells[2].0, "cash");
        let top = cells.iter().map(|c| c.1).fold(0.0, f64::max);
        assert!(top > 0.99, "{day}: {cells:?}");
    }
}

#[test]
fn checkpoint_asset_mismatch_fails() {
    let dir = tiny_dir();
    assert_eq!(code(&migt(dir.path(), &["--config", "tiny.toml", "--out", "a", "train"])), 0);
    let three = TINY.replace("n_assets = 2", "n_assets = 3").replace("drift = [0.001, 0.0]", "drift = [0.001]");
    write_config(dir.path(), "three.toml", &three);
    let o = migt(dir.path(), &["--config", "three.toml", "backtest", "--checkpoint", "a/checkpoint.txt"]);
    assert_eq!(code(&o), 1);
    assert!(!stderr(&o).is_empty());
}

#[test]
fn ablation_over_four_variants_gives_four_rows() {
    let dir = tiny_dir();
    let o = migt(dir.path(), &["--config", "tiny.toml", "--out", "abl", "ablate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = read(dir.path().join("abl/ablation.csv"));
    let variants: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "no_norm", "no_gating", "no_transformer"]);
    assert_eq!(fs::read_dir(dir.path().join("abl/arms")).unwrap().count(), 4);
    assert!(dir.path().join("abl/convergence.csv").exists());
}

#[test]
fn outlier_fractions_give_one_arm_per_training_panel() {
    let dir = tempfile::tempdir().unwrap();
    let config = TINY.replace(
        "[ablation]",
        "[ablation]\nvariants = [\"full\"]\noutlier_fractions = [0.0, 0.05, 0.10]",
    );
    write_config(dir.path(), "frac.toml", &config);
    let o = migt(dir.path(), &["--config", "frac.toml", "--out", "abl", "ablate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = read(dir.path().join("abl/ablation.csv"));
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let fractions: Vec<&str> = rows.iter().map(|r| r[2]).collect();
    assert_eq!(fractions, ["0", "0.05", "0.1"]);
    let returns: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[4]).collect();
    assert_eq!(returns.len(), 3);
    for f in ["0", "0.05", "0.1"] {
        assert!(dir.path().join(format!("abl/arms/full_seed0_frac{f}.checkpoint.txt")).exists());
    }
}

#[test]
fn ablation_exits_nonzero_when_every_arm_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let config = TINY
        .replace("learning_rate = 0.003", "learning_rate = 1e9")
        .replace("[ablation]", "[ablation]\nvariants = [\"full\", \"no_gating\"]");
    write_config(dir.path(), "hostile.toml", &config);
    let o = migt(dir.path(), &["--config", "hostile.toml", "--out", "abl", "ablate"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let table = read(dir.path().join("abl/ablation.csv"));
    assert_eq!(table.matches(",diverged,").count(), 2);
}

#[test]
fn report_without_results_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(code(&migt(dir.path(), &["--out", "empty", "report"])), 1);
    assert_eq!(code(&migt(dir.path(), &["--out", "nowhere", "report"])), 3);
}
