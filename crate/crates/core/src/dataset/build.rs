use crate::dtw::ChannelProfile;
use crate::error::{Error, Result};
use crate::gaf::{encode_window, FeatureSet};
use crate::ohlc::{
    Candle, CandleColor, LabeledSample, OhlcSeries, PatternClass, TrendDirection, MAX_WINDOW_SIZE,
    MIN_WINDOW_SIZE, WINDOW_LEN,
};
use crate::rules::{
    assess_trend, calibrate_thresholds, percentile_sorted, PatternRuleSet, RuleThresholds,
    PATTERN_BARS,
};

use super::{ClassSummary, DatasetManifest, Provenance, SampleRecord, Split, SplitBoundaries};

pub const TARGETS_PER_CLASS: usize = 10;
pub const DEFAULT_DTW_PERCENTILE: f64 = 20.0;
/// Collected windows of one class closer than this many bars are duplicates.
pub const DEDUP_GAP: usize = 3;
pub const TRAIN_FRACTION: f64 = 0.64;
pub const VAL_FRACTION: f64 = 0.16;
/// Index of the newest bar eligible to start a pattern when scanning back.
pub const REVERSAL_SCAN_START: usize = WINDOW_LEN - MIN_WINDOW_SIZE;

// every SAMPLE_STRIDE-th window is scanned exactly to estimate a safe bound
const SAMPLE_STRIDE: usize = 16;
const BOUND_MARGIN: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub feature_set: FeatureSet,
    pub dtw_percentile: f64,
    /// Optional cap applied on top of balancing to the smallest class.
    pub max_per_class: Option<usize>,
    pub targets_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            feature_set: FeatureSet::Culr,
            dtw_percentile: DEFAULT_DTW_PERCENTILE,
            max_per_class: None,
            targets_per_class: TARGETS_PER_CLASS,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dtw_percentile > 0.0 && self.dtw_percentile <= 100.0) {
            return Err(Error::invalid(format!(
                "dtw percentile {} not in (0, 100]",
                self.dtw_percentile
            )));
        }
        if self.max_per_class == Some(0) {
            return Err(Error::invalid("max per class must be positive"));
        }
        if self.targets_per_class == 0 {
            return Err(Error::invalid("need at least one target per class"));
        }
        Ok(())
    }
}

/// A window (by start index) that satisfies a class's rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleMatch {
    pub start: usize,
    pub class: PatternClass,
    pub slope: f64,
}

fn window_count(corpus: &OhlcSeries) -> usize {
    corpus.len().saturating_sub(WINDOW_LEN - 1)
}

fn window_at(corpus: &OhlcSeries, start: usize) -> &[Candle] {
    &corpus.candles()[start..start + WINDOW_LEN]
}

/// Every full window matching each class, indexed by `PatternClass::index`.
pub fn find_matches(
    corpus: &OhlcSeries,
    rules: &PatternRuleSet,
    thresholds: &RuleThresholds,
) -> Result<Vec<Vec<RuleMatch>>> {
    let mut out = vec![Vec::new(); PatternClass::COUNT];
    for start in 0..window_count(corpus) {
        let window = window_at(corpus, start);
        let trend = assess_trend(window, thresholds)?;
        if trend.direction == TrendDirection::None {
            continue;
        }
        let bars: &[Candle; PATTERN_BARS] = window[WINDOW_LEN - PATTERN_BARS..]
            .try_into()
            .expect("window has pattern bars");
        for class in PatternClass::ALL {
            let rule = rules.rule(class);
            if rule.trend == trend.direction && rule.clauses.iter().all(|c| c.holds(bars, thresholds)) {
                out[class.index()].push(RuleMatch {
                    start,
                    class,
                    slope: trend.slope,
                });
            }
        }
    }
    Ok(out)
}

/// The `count` matches with the steepest trend per class; ties go to the
/// earlier window.
pub fn top_targets(matches: &[Vec<RuleMatch>], count: usize) -> Result<Vec<Vec<RuleMatch>>> {
    let mut out = Vec::with_capacity(PatternClass::COUNT);
    for class in PatternClass::ALL {
        let mut m = matches[class.index()].clone();
        if m.len() < count {
            return Err(Error::InsufficientMatches {
                class,
                found: m.len(),
                needed: count,
            });
        }
        m.sort_by(|a, b| b.slope.abs().total_cmp(&a.slope.abs()).then(a.start.cmp(&b.start)));
        m.truncate(count);
        out.push(m);
    }
    Ok(out)
}

/// Ten steepest rule matches per class, indexed by `PatternClass::index`.
pub fn select_top_targets(
    corpus: &OhlcSeries,
    rules: &PatternRuleSet,
    thresholds: &RuleThresholds,
) -> Result<Vec<Vec<RuleMatch>>> {
    top_targets(&find_matches(corpus, rules, thresholds)?, TARGETS_PER_CLASS)
}

/// A collected window and its distance to the nearest target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub start: usize,
    pub class: PatternClass,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    pub class: PatternClass,
    /// Distance percentile over all scanned windows; windows at or below it are kept.
    pub threshold: f64,
    pub scanned: usize,
    pub candidates: Vec<Candidate>,
}

fn nearest(profile: &ChannelProfile, targets: &[ChannelProfile], bound: f64, scratch: &mut Vec<f64>) -> Option<f64> {
    let mut best: Option<f64> = None;
    for t in targets {
        let limit = best.map_or(bound, |b| b.min(bound));
        if let Some(d) = profile.distance_below(t, limit, scratch) {
            if best.is_none_or(|b| d < b) {
                best = Some(d);
            }
        }
    }
    best
}

/// For each class, the minimum multichannel DTW of every window to that
/// class's targets, keeping windows at or below the class's `percentile`.
///
/// Distances above a bound estimated from a strided sample are abandoned
/// early; the percentile is still exact because enough windows fall under
/// the bound to fix its rank (a class that falls short is rescanned without
/// a bound).
pub fn collect_similar(
    corpus: &OhlcSeries,
    targets: &[(PatternClass, Vec<usize>)],
    percentile: f64,
) -> Result<Vec<Collection>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::invalid(format!("percentile {percentile} not in (0, 100]")));
    }
    let n = window_count(corpus);
    if n == 0 {
        return Err(Error::InsufficientData("corpus shorter than one window".into()));
    }
    let mut target_profiles = Vec::with_capacity(targets.len());
    for (class, starts) in targets {
        if starts.is_empty() {
            return Err(Error::invalid(format!("no targets for {class}")));
        }
        let profiles = starts
            .iter()
            .map(|&s| {
                if s >= n {
                    return Err(Error::invalid(format!("target start {s} outside the corpus")));
                }
                ChannelProfile::from_window(window_at(corpus, s))
            })
            .collect::<Result<Vec<_>>>()?;
        target_profiles.push(profiles);
    }
    let mut scratch = Vec::new();

    let mut samples = vec![Vec::new(); targets.len()];
    for start in (0..n).step_by(SAMPLE_STRIDE) {
        let p = ChannelProfile::from_window(window_at(corpus, start))?;
        for (k, tp) in target_profiles.iter().enumerate() {
            samples[k].push(nearest(&p, tp, f64::INFINITY, &mut scratch).expect("unbounded"));
        }
    }
    let bounds: Vec<f64> = samples
        .iter_mut()
        .map(|s| {
            s.sort_by(f64::total_cmp);
            percentile_sorted(s, (percentile + BOUND_MARGIN).min(100.0))
        })
        .collect();

    let mut dists: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(n); targets.len()];
    for start in 0..n {
        let p = ChannelProfile::from_window(window_at(corpus, start))?;
        for (k, tp) in target_profiles.iter().enumerate() {
            dists[k].push(nearest(&p, tp, bounds[k], &mut scratch));
        }
    }

    let rank = percentile / 100.0 * (n - 1) as f64;
    let needed = rank.ceil() as usize + 1;
    let mut out = Vec::with_capacity(targets.len());
    for (k, (class, _)) in targets.iter().enumerate() {
        let mut known: Vec<f64> = dists[k].iter().flatten().copied().collect();
        if known.len() < needed {
            for start in 0..n {
                if dists[k][start].is_none() {
                    let p = ChannelProfile::from_window(window_at(corpus, start))?;
                    dists[k][start] = nearest(&p, &target_profiles[k], f64::INFINITY, &mut scratch);
                }
            }
            known = dists[k].iter().flatten().copied().collect();
        }
        known.sort_by(f64::total_cmp);
        // every abandoned distance exceeds all known ones, so the low ranks are exact
        let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
        let threshold = known[lo] + (known[hi] - known[lo]) * (rank - lo as f64);
        let candidates = dists[k]
            .iter()
            .enumerate()
            .filter_map(|(start, d)| match d {
                Some(d) if *d <= threshold => Some(Candidate {
                    start,
                    class: *class,
                    distance: *d,
                }),
                _ => None,
            })
            .collect();
        out.push(Collection {
            class: *class,
            threshold,
            scanned: n,
            candidates,
        });
    }
    Ok(out)
}

/// Pattern length from the first bar, scanning back from index 11, whose
/// color opposes the trend (a doji counts as black).
pub fn assign_window_size(window: &[Candle], trend: TrendDirection) -> Result<usize> {
    if window.len() != WINDOW_LEN {
        return Err(Error::invalid(format!(
            "window size assignment needs {WINDOW_LEN} candles, got {}",
            window.len()
        )));
    }
    let opposing = match trend {
        TrendDirection::Up => CandleColor::Black,
        TrendDirection::Down => CandleColor::White,
        TrendDirection::None => return Err(Error::invalid("window size needs a trend direction")),
    };
    let start = (0..=REVERSAL_SCAN_START)
        .rev()
        .find(|&i| window[i].color().reversal_color() == opposing);
    Ok(match start {
        Some(i) => (WINDOW_LEN - i).clamp(MIN_WINDOW_SIZE, MAX_WINDOW_SIZE),
        None => MAX_WINDOW_SIZE,
    })
}

/// Assigns each window claimed by several classes to the nearest one (ties
/// to the lower id), then drops same-class windows within `DEDUP_GAP` bars
/// of a closer one.
pub fn resolve_candidates(collections: &[Collection], n_windows: usize) -> Vec<Vec<Candidate>> {
    let mut owner: Vec<Option<Candidate>> = vec![None; n_windows];
    for col in collections {
        for c in &col.candidates {
            let slot = &mut owner[c.start];
            let better = match slot {
                None => true,
                Some(o) => c.distance < o.distance || (c.distance == o.distance && c.class.id() < o.class.id()),
            };
            if better {
                *slot = Some(*c);
            }
        }
    }
    let mut per_class: Vec<Vec<Candidate>> = vec![Vec::new(); PatternClass::COUNT];
    for c in owner.into_iter().flatten() {
        per_class[c.class.index()].push(c);
    }
    for list in &mut per_class {
        list.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.start.cmp(&b.start)));
        let mut blocked = vec![false; n_windows];
        list.retain(|c| {
            if blocked[c.start] {
                return false;
            }
            let lo = c.start.saturating_sub(DEDUP_GAP - 1);
            let hi = (c.start + DEDUP_GAP - 1).min(n_windows - 1);
            blocked[lo..=hi].iter_mut().for_each(|b| *b = true);
            true
        });
    }
    per_class
}

fn check_provenance(provenance: &Provenance, corpus: &OhlcSeries) -> Result<()> {
    if let Provenance::Synthetic(cfg) = provenance {
        if cfg.n_bars != corpus.len() {
            return Err(Error::invalid("synthetic provenance does not match the corpus length"));
        }
    }
    Ok(())
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SampleRecord>,
}

/// Full labeling pipeline from a raw corpus to split, encoded records.
pub fn build_dataset(corpus: &OhlcSeries, cfg: &DatasetConfig, provenance: Provenance) -> Result<Dataset> {
    cfg.validate()?;
    check_provenance(&provenance, corpus)?;
    let bar_interval_ms = corpus
        .bar_interval_ms()
        .ok_or_else(|| Error::InsufficientData("corpus needs at least two bars".into()))?;
    let thresholds = calibrate_thresholds(corpus)?;
    let rules = PatternRuleSet::standard();
    let matches = find_matches(corpus, &rules, &thresholds)?;
    let targets = top_targets(&matches, cfg.targets_per_class)?;
    let target_starts: Vec<(PatternClass, Vec<usize>)> = PatternClass::ALL
        .iter()
        .map(|&c| (c, targets[c.index()].iter().map(|m| m.start).collect()))
        .collect();
    let collections = collect_similar(corpus, &target_starts, cfg.dtw_percentile)?;
    let n_windows = window_count(corpus);
    let resolved = resolve_candidates(&collections, n_windows);

    let smallest = resolved.iter().map(Vec::len).min().unwrap_or(0);
    let cap = cfg.max_per_class.map_or(smallest, |m| m.min(smallest));
    if cap == 0 {
        return Err(Error::InsufficientData("a class collected no windows".into()));
    }

    let mut chosen: Vec<Candidate> = resolved.iter().flat_map(|l| l.iter().take(cap).copied()).collect();
    chosen.sort_by_key(|c| c.start);
    let total = chosen.len();
    let n_train = (TRAIN_FRACTION * total as f64).floor() as usize;
    let n_val = (VAL_FRACTION * total as f64).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= total {
        return Err(Error::InsufficientData(format!("{total} samples cannot fill three splits")));
    }

    let mut records = Vec::with_capacity(total);
    for (i, c) in chosen.iter().enumerate() {
        let window = corpus.window(c.start, WINDOW_LEN)?;
        let w = assign_window_size(window.candles(), c.class.required_trend())?;
        let tensor = encode_window(window.candles(), cfg.feature_set)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        records.push(SampleRecord {
            sample: LabeledSample::new(window, c.class, w)?,
            split,
            tensor: tensor.to_flat().iter().map(|&v| v as f32).collect(),
        });
    }

    let classes = PatternClass::ALL
        .iter()
        .map(|&class| {
            let k = class.index();
            let count = |s: Split| {
                records
                    .iter()
                    .filter(|r| r.sample.class() == class && r.split == s)
                    .count()
            };
            ClassSummary {
                class: class.name().to_string(),
                id: class.id(),
                rule_matches: matches[k].len(),
                target_end_timestamps: targets[k]
                    .iter()
                    .map(|m| corpus.candles()[m.start + WINDOW_LEN - 1].timestamp)
                    .collect(),
                dtw_threshold: collections[k].threshold,
                collected: collections[k].candidates.len(),
                after_dedup: resolved[k].len(),
                train: count(Split::Train),
                val: count(Split::Val),
                test: count(Split::Test),
            }
        })
        .collect();

    let ts = |i: usize| records[i].sample.end_timestamp();
    let mut hist = [0usize; MAX_WINDOW_SIZE - MIN_WINDOW_SIZE + 1];
    for r in &records {
        hist[r.sample.window_size() - MIN_WINDOW_SIZE] += 1;
    }
    let manifest = DatasetManifest {
        format_version: super::FORMAT_VERSION,
        feature_set: cfg.feature_set,
        provenance,
        n_bars: corpus.len(),
        bar_interval_ms,
        thresholds,
        dtw_percentile: cfg.dtw_percentile,
        targets_per_class: cfg.targets_per_class,
        max_per_class: cfg.max_per_class,
        per_class_cap: cap,
        classes,
        split_counts: [n_train, n_val, total - n_train - n_val],
        split_boundaries: SplitBoundaries {
            train_start: ts(0),
            train_end: ts(n_train - 1),
            val_start: ts(n_train),
            val_end: ts(n_train + n_val - 1),
            test_start: ts(n_train + n_val),
            test_end: ts(total - 1),
        },
        window_size_histogram: hist.to_vec(),
        record_count: total,
        records_file: super::RECORDS_FILE.to_string(),
    };
    Ok(Dataset { manifest, records })
}
