use std::sync::OnceLock;

use super::*;
use crate::dtw::multichannel_dtw;
use crate::ohlc::{CandleColor, TrendDirection};
use crate::rules::{calibrate_thresholds, percentile, PatternRuleSet};

fn corpus_cfg() -> SyntheticConfig {
    SyntheticConfig {
        seed: 3,
        n_bars: 40_000,
        ..SyntheticConfig::default()
    }
}

fn corpus() -> &'static OhlcSeries {
    static C: OnceLock<OhlcSeries> = OnceLock::new();
    C.get_or_init(|| generate_synthetic(&corpus_cfg()).unwrap())
}

fn dataset() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| {
        build_dataset(corpus(), &small_cfg(), Provenance::Synthetic(corpus_cfg())).unwrap()
    })
}

// the test corpus is too short for ten matches of every class
fn small_cfg() -> DatasetConfig {
    DatasetConfig {
        max_per_class: Some(40),
        targets_per_class: 3,
        ..DatasetConfig::default()
    }
}

#[test]
fn synthetic_is_deterministic_and_valid() {
    let cfg = SyntheticConfig {
        n_bars: 2000,
        ..SyntheticConfig::default()
    };
    let a = generate_synthetic(&cfg).unwrap();
    assert_eq!(a, generate_synthetic(&cfg).unwrap());
    assert_ne!(a, generate_synthetic(&SyntheticConfig { seed: 8, ..cfg.clone() }).unwrap());
    assert_eq!(a.len(), 2000);
    assert_eq!(a.candles()[0].timestamp, SYNTHETIC_START_MS);
    assert_eq!(a.bar_interval_ms(), Some(SYNTHETIC_BAR_MS));
    for w in a.candles().windows(2) {
        w[1].validate().unwrap();
        assert_eq!(w[1].open, w[0].close);
    }
}

#[test]
fn vanishing_volatility_leaves_drift_sized_ranges() {
    let drift = 1e-4;
    let cfg = SyntheticConfig {
        n_bars: 1000,
        drift,
        volatility: 1e-9,
        ..SyntheticConfig::default()
    };
    let s = generate_synthetic(&cfg).unwrap();
    let max_rel = s
        .candles()
        .iter()
        .map(|c| (c.high - c.low) / c.open)
        .fold(0.0f64, f64::max);
    assert!(max_rel <= drift * 1.001 + 1e-8, "max range {max_rel}");
    assert!(max_rel >= drift * 0.999);
}

#[test]
fn synthetic_config_validation() {
    let base = SyntheticConfig::default();
    for bad in [
        SyntheticConfig { n_bars: 999, ..base.clone() },
        SyntheticConfig { volatility: 0.0, ..base.clone() },
        SyntheticConfig { initial_price: -1.0, ..base.clone() },
    ] {
        assert!(generate_synthetic(&bad).is_err());
    }
}

fn candle(ts: i64, color: CandleColor) -> Candle {
    match color {
        CandleColor::White => Candle::new(ts, 1.0, 2.1, 0.9, 2.0).unwrap(),
        CandleColor::Black => Candle::new(ts, 2.0, 2.1, 0.9, 1.0).unwrap(),
        CandleColor::Doji => Candle::new(ts, 1.5, 2.1, 0.9, 1.5).unwrap(),
    }
}

fn colored(colors: &[(usize, CandleColor)], default: CandleColor) -> Vec<Candle> {
    (0..16)
        .map(|i| {
            let c = colors.iter().find(|(k, _)| *k == i).map_or(default, |(_, c)| *c);
            candle(i as i64, c)
        })
        .collect()
}

#[test]
fn window_size_examples() {
    use CandleColor::*;
    let w = colored(&[(9, Black), (10, White), (11, White)], White);
    assert_eq!(assign_window_size(&w, TrendDirection::Up).unwrap(), 7);
    assert_eq!(assign_window_size(&colored(&[(12, Black), (15, Black)], White), TrendDirection::Up).unwrap(), 16);
    assert_eq!(assign_window_size(&colored(&[(11, Black)], White), TrendDirection::Up).unwrap(), 5);
    assert_eq!(assign_window_size(&colored(&[(11, Doji)], White), TrendDirection::Up).unwrap(), 5);
    assert_eq!(assign_window_size(&colored(&[(0, White)], Black), TrendDirection::Down).unwrap(), 16);
    assert_eq!(assign_window_size(&colored(&[(3, White)], Black), TrendDirection::Down).unwrap(), 13);
    // a doji never reverses a downtrend
    assert_eq!(assign_window_size(&colored(&[(11, Doji)], Black), TrendDirection::Down).unwrap(), 16);
    assert!(assign_window_size(&colored(&[], White), TrendDirection::None).is_err());
    assert!(assign_window_size(&colored(&[], White)[..15], TrendDirection::Up).is_err());
}

#[test]
fn targets_are_the_steepest_matches() {
    let c = corpus();
    let t = calibrate_thresholds(c).unwrap();
    let rules = PatternRuleSet::standard();
    let matches = find_matches(c, &rules, &t).unwrap();
    let targets = top_targets(&matches, 3).unwrap();
    for class in PatternClass::ALL {
        let k = class.index();
        // exhaustive oracle: evaluate the rule on every window directly
        let oracle: Vec<usize> = (0..=c.len() - 16)
            .filter(|&s| rules.matches(&c.candles()[s..s + 16], class, &t).unwrap())
            .collect();
        assert_eq!(matches[k].iter().map(|m| m.start).collect::<Vec<_>>(), oracle);
        assert_eq!(targets[k].len(), 3);
        let min_selected = targets[k].iter().map(|m| m.slope.abs()).fold(f64::INFINITY, f64::min);
        for m in &matches[k] {
            if !targets[k].iter().any(|s| s.start == m.start) {
                assert!(m.slope.abs() <= min_selected);
            }
        }
    }
    assert_eq!(targets, top_targets(&find_matches(c, &rules, &t).unwrap(), 3).unwrap());
    // InvertedHammer has only four matches here
    assert!(matches!(
        select_top_targets(c, &rules, &t),
        Err(Error::InsufficientMatches { needed: 10, .. })
    ));

    // a class with exactly as many matches as targets keeps all of them
    let mut exact = matches.clone();
    exact[0].truncate(3);
    let picked = top_targets(&exact, 3).unwrap();
    let mut starts: Vec<usize> = picked[0].iter().map(|m| m.start).collect();
    starts.sort_unstable();
    assert_eq!(starts, exact[0].iter().map(|m| m.start).collect::<Vec<_>>());
    exact[3].truncate(2);
    assert!(matches!(
        top_targets(&exact, 3),
        Err(Error::InsufficientMatches { found: 2, needed: 3, .. })
    ));
}

#[test]
fn collection_matches_brute_force() {
    let c = generate_synthetic(&SyntheticConfig {
        seed: 5,
        n_bars: 1200,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let starts = vec![10, 300, 777];
    let targets = vec![(PatternClass::EveningStar, starts.clone())];
    let n = c.len() - 15;
    let exact: Vec<f64> = (0..n)
        .map(|s| {
            starts
                .iter()
                .map(|&t| multichannel_dtw(&c.candles()[s..s + 16], &c.candles()[t..t + 16]).unwrap())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut previous = 0;
    for p in [5.0, 20.0, 50.0] {
        let col = &collect_similar(&c, &targets, p).unwrap()[0];
        let threshold = percentile(&exact, p).unwrap();
        assert!((col.threshold - threshold).abs() <= 1e-12);
        let expected: Vec<usize> = (0..n).filter(|&s| exact[s] <= threshold).collect();
        let got: Vec<usize> = col.candidates.iter().map(|c| c.start).collect();
        assert_eq!(got, expected);
        for cand in &col.candidates {
            assert!((cand.distance - exact[cand.start]).abs() <= 1e-9);
        }
        for s in &starts {
            assert!(got.contains(s));
        }
        // kept fraction is the percentile up to ties at the threshold
        let frac = got.len() as f64 / n as f64;
        assert!((frac - p / 100.0).abs() <= 2.0 / n as f64, "fraction {frac} for {p}");
        assert!(got.len() >= previous);
        previous = got.len();
    }
}

#[test]
fn resolution_prefers_nearest_class_and_dedups() {
    let cand = |start, class, distance| Candidate { start, class, distance };
    let cols = vec![
        Collection {
            class: PatternClass::MorningStar,
            threshold: 1.0,
            scanned: 20,
            candidates: vec![cand(0, PatternClass::MorningStar, 0.5), cand(1, PatternClass::MorningStar, 0.2), cand(4, PatternClass::MorningStar, 0.3), cand(9, PatternClass::MorningStar, 0.4)],
        },
        Collection {
            class: PatternClass::EveningStar,
            threshold: 1.0,
            scanned: 20,
            candidates: vec![cand(9, PatternClass::EveningStar, 0.4), cand(12, PatternClass::EveningStar, 0.1)],
        },
    ];
    let r = resolve_candidates(&cols, 20);
    // 0 is within two bars of the closer 1; 4 is three bars away and kept
    assert_eq!(r[0].iter().map(|c| c.start).collect::<Vec<_>>(), vec![1, 4, 9]);
    assert_eq!(r[1].iter().map(|c| c.start).collect::<Vec<_>>(), vec![12]);
}

#[test]
fn built_dataset_contract() {
    let d = dataset();
    let m = &d.manifest;
    m.check_records(&d.records).unwrap();
    assert_eq!(m.per_class_cap, 40);
    assert_eq!(d.records.len(), 8 * 40);
    for r in &d.records {
        assert!(r.tensor_matches(m.feature_set).unwrap());
        assert!((5..=16).contains(&r.sample.window_size()));
    }
    // chronological: sorting by timestamp and by split tag agree
    let tags: Vec<u8> = d.records.iter().map(|r| r.split.tag()).collect();
    assert!(tags.windows(2).all(|w| w[0] <= w[1]));
    let ts: Vec<i64> = d.records.iter().map(|r| r.sample.end_timestamp()).collect();
    assert!(ts.windows(2).all(|w| w[0] < w[1]));
    let b = m.split_boundaries;
    assert!(b.train_end < b.val_start && b.val_end < b.test_start);
    assert_eq!(m.split_counts, [204, 51, 65]);
    for class in PatternClass::ALL {
        assert!(d.records.iter().any(|r| r.sample.class() == class && r.split == Split::Train));
    }
}

#[test]
fn container_roundtrip() {
    let d = dataset();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), d).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, d.manifest);
    assert_eq!(back.records, d.records);
    assert_eq!(fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(), d.manifest.to_json().unwrap());

    let mut bytes = Vec::new();
    write_records(&d.records, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"GAFD");
    assert_eq!(bytes.len(), 12 + d.records.len() * RECORD_BYTES);
    assert!(read_records(&bytes[..bytes.len() - 1], m_interval(d)).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(read_records(&wrong, m_interval(d)).is_err());
    let mut bad_class = bytes.clone();
    bad_class[12] = 9;
    assert!(read_records(&bad_class, m_interval(d)).is_err());

    let mut tampered = d.manifest.clone();
    tampered.split_counts[0] += 1;
    assert!(tampered.check_records(&d.records).is_err());
}

fn m_interval(d: &Dataset) -> i64 {
    d.manifest.bar_interval_ms
}

#[test]
fn build_is_deterministic() {
    let again = build_dataset(corpus(), &small_cfg(), Provenance::Synthetic(corpus_cfg())).unwrap();
    assert_eq!(again.manifest.to_json().unwrap(), dataset().manifest.to_json().unwrap());
    assert_eq!(again.records, dataset().records);
}
