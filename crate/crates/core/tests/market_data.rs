use migt_core::market_data::{
    align_and_split, inject_outliers, load_ohlcv, outlier_count, synth_market, write_ohlcv, DateRange,
    SynthSpec, DEFAULT_OUTLIER_FACTORS,
};
use proptest::prelude::*;

fn changed_cells(a: &migt_core::market_data::PanelData, b: &migt_core::market_data::PanelData) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for d in 0..a.n_dates() {
        for k in 0..a.n_assets() {
            if a.bar(d, k) != b.bar(d, k) {
                out.push((d, k));
            }
        }
    }
    out
}

#[test]
fn outlier_injection_counts_and_seeds() {
    let p = synth_market(&SynthSpec::uniform(5, 120, 0.0005, 0.015, 11)).unwrap();
    let cells = p.record_count();
    for fraction in [0.05, 0.10] {
        let a = inject_outliers(&p, fraction, &DEFAULT_OUTLIER_FACTORS, 1).unwrap();
        let a2 = inject_outliers(&p, fraction, &DEFAULT_OUTLIER_FACTORS, 1).unwrap();
        let b = inject_outliers(&p, fraction, &DEFAULT_OUTLIER_FACTORS, 2).unwrap();
        assert_eq!(a, a2, "same seed must be bit-identical");
        let (ca, cb) = (changed_cells(&p, &a), changed_cells(&p, &b));
        assert_eq!(ca.len(), outlier_count(fraction, cells));
        assert_eq!(cb.len(), ca.len());
        assert_ne!(ca, cb);
        for &(d, k) in &ca {
            let (orig, shocked) = (p.bar(d, k).unwrap(), a.bar(d, k).unwrap());
            let ratio = shocked.close / orig.close;
            assert!(DEFAULT_OUTLIER_FACTORS.iter().any(|f| (ratio - f).abs() < 1e-12));
            assert_eq!(shocked.volume, orig.volume);
            assert_eq!(shocked.adj_close, orig.adj_close);
            shocked.validate().unwrap();
        }
    }
    // 5% of 600 cells
    assert_eq!(outlier_count(0.05, cells), 30);
}

#[test]
fn trending_asset_ends_highest() {
    let spec = SynthSpec {
        n_assets: 3,
        n_days: 2000,
        drift: vec![0.001, 0.0, 0.0],
        volatility: vec![0.01; 3],
        seed: 42,
    };
    let p = synth_market(&spec).unwrap();
    let last = p.n_dates() - 1;
    let closes: Vec<f64> = (0..3).map(|k| p.bar(last, k).unwrap().close).collect();
    assert!(closes[0] > closes[1] && closes[0] > closes[2], "{closes:?}");
    // 1.001^1999 ≈ 7.4; the zero-drift assets stay within a few multiples of 100
    assert!(closes[0] > 300.0);
}

#[test]
fn synthetic_market_is_deterministic() {
    let spec = SynthSpec::uniform(3, 80, 0.0002, 0.02, 9);
    assert_eq!(synth_market(&spec).unwrap(), synth_market(&spec).unwrap());
    let other = SynthSpec { seed: 10, ..spec };
    assert_ne!(synth_market(&other).unwrap(), synth_market(&SynthSpec::uniform(3, 80, 0.0002, 0.02, 9)).unwrap());
}

#[test]
fn split_then_concat_is_idempotent() {
    let p = synth_market(&SynthSpec::uniform(3, 60, 0.0, 0.01, 4)).unwrap();
    let dates = p.dates().to_vec();
    let train = DateRange::new(dates[0], dates[39]);
    let test = DateRange::new(dates[40], dates[59]);
    let s = align_and_split(&p, train, test).unwrap();
    assert_eq!(s.train.tickers(), s.test.tickers());
    let joined = s.train.concat(&s.test).unwrap();
    assert_eq!(joined, p);
    let s2 = align_and_split(&joined, train, test).unwrap();
    assert_eq!(s2.train, s.train);
    assert_eq!(s2.test, s.test);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn csv_round_trip(seed in 0u64..1000, n_assets in 1usize..4, n_days in 2usize..15) {
        let p = synth_market(&SynthSpec::uniform(n_assets, n_days, 0.001, 0.03, seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_ohlcv(&p, &path).unwrap();
        let back = load_ohlcv(&path).unwrap();
        prop_assert_eq!(&back, &p);
        let path2 = dir.path().join("again.csv");
        write_ohlcv(&back, &path2).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}

#[test]
fn reader_accepts_permuted_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    std::fs::write(
        &path,
        "ticker,date,volume,adj_close,close,low,high,open\nAAA,2021-03-01,5,10,10,9,11,10\n",
    )
    .unwrap();
    let p = load_ohlcv(&path).unwrap();
    let b = p.bar(0, 0).unwrap();
    assert_eq!((b.open, b.high, b.low, b.close, b.volume), (10.0, 11.0, 9.0, 10.0, 5.0));
}
