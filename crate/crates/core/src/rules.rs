//! Rule-based definitions of the eight candlestick patterns.
//!
//! Every pattern is a trend segment followed by three decisive bars. The
//! trend is the scale-free least-squares slope of the segment's closes,
//! compared against percentile cutoffs calibrated on a corpus. The bar
//! clauses compare bodies against the 75th ("long") and 25th ("short")
//! percentile of body lengths. `docs/pattern_rules.md` lists every clause.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ohlc::{Candle, CandleColor, OhlcSeries, PatternClass, TrendDirection, WINDOW_LEN};

/// Bars at the end of a window that carry the pattern shape.
pub const PATTERN_BARS: usize = 3;
/// Trend bars preceding the pattern bars in a full window.
pub const TREND_LOOKBACK: usize = WINDOW_LEN - PATTERN_BARS;
/// Shortest window `match_pattern` accepts.
pub const MIN_MATCH_LEN: usize = PATTERN_BARS + 2;
/// Minimum number of candidate windows needed for calibration.
pub const MIN_CALIBRATION_WINDOWS: usize = 100;

pub const TREND_PERCENTILE: f64 = 80.0;
pub const LONG_BODY_PERCENTILE: f64 = 75.0;
pub const SHORT_BODY_PERCENTILE: f64 = 25.0;

/// Percentile with linear interpolation between closest ranks
/// (rank `p / 100 * (n - 1)` of the sorted values).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Least-squares slope of the last `lookback` closes against bar index,
/// divided by their mean.
pub fn trend_slope(closes: &[f64], lookback: usize) -> Result<f64> {
    if lookback < 2 || closes.len() < lookback {
        return Err(Error::invalid(format!(
            "trend slope needs lookback >= 2 and {lookback} closes, got {}",
            closes.len()
        )));
    }
    let ys = &closes[closes.len() - lookback..];
    let n = lookback as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    if y_mean == 0.0 {
        return Err(Error::invalid("trend slope of zero-mean closes"));
    }
    Ok(sxy / sxx / y_mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendAssessment {
    pub slope: f64,
    pub direction: TrendDirection,
}

/// Calibrated cutoffs shared by every rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleThresholds {
    /// Smallest positive slope counted as an uptrend.
    pub trend_cutoff_up: f64,
    /// Smallest slope magnitude counted as a downtrend.
    pub trend_cutoff_down: f64,
    pub long_body_cutoff: f64,
    pub short_body_cutoff: f64,
}

impl RuleThresholds {
    pub fn new(
        trend_cutoff_up: f64,
        trend_cutoff_down: f64,
        long_body_cutoff: f64,
        short_body_cutoff: f64,
    ) -> Result<Self> {
        let t = RuleThresholds {
            trend_cutoff_up,
            trend_cutoff_down,
            long_body_cutoff,
            short_body_cutoff,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.trend_cutoff_up,
            self.trend_cutoff_down,
            self.long_body_cutoff,
            self.short_body_cutoff,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("thresholds must be finite and non-negative"));
        }
        if self.long_body_cutoff < self.short_body_cutoff {
            return Err(Error::invalid("long body cutoff below short body cutoff"));
        }
        Ok(())
    }

    /// Thresholds for the price-mirrored market: the trend cutoffs swap.
    pub fn mirrored(&self) -> RuleThresholds {
        RuleThresholds {
            trend_cutoff_up: self.trend_cutoff_down,
            trend_cutoff_down: self.trend_cutoff_up,
            ..*self
        }
    }

    pub fn classify_slope(&self, slope: f64) -> TrendDirection {
        if slope > 0.0 && slope >= self.trend_cutoff_up {
            TrendDirection::Up
        } else if slope < 0.0 && -slope >= self.trend_cutoff_down {
            TrendDirection::Down
        } else {
            TrendDirection::None
        }
    }

    /// Renders the `key = value` text form.
    pub fn to_text(&self) -> String {
        format!(
            "# candlestick rule thresholds\n\
             trend_cutoff_up = {}\n\
             trend_cutoff_down = {}\n\
             long_body_cutoff = {}\n\
             short_body_cutoff = {}\n",
            self.trend_cutoff_up, self.trend_cutoff_down, self.long_body_cutoff, self.short_body_cutoff
        )
    }
}

impl FromStr for RuleThresholds {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut values: [Option<f64>; 4] = [None; 4];
        const KEYS: [&str; 4] = [
            "trend_cutoff_up",
            "trend_cutoff_down",
            "long_body_cutoff",
            "short_body_cutoff",
        ];
        for line in s.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("thresholds", format!("no '=' in {line:?}")))?;
            let slot = KEYS
                .iter()
                .position(|k| *k == key.trim())
                .ok_or_else(|| Error::format("thresholds", format!("unknown key {:?}", key.trim())))?;
            let v = value
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::format("thresholds", format!("bad value in {line:?}")))?;
            values[slot] = Some(v);
        }
        let get = |i: usize| {
            values[i].ok_or_else(|| Error::format("thresholds", format!("missing {}", KEYS[i])))
        };
        RuleThresholds::new(get(0)?, get(1)?, get(2)?, get(3)?)
    }
}

/// Slopes of every 13-bar trend segment that starts a full window.
pub fn window_trend_slopes(corpus: &OhlcSeries) -> Vec<f64> {
    let closes = corpus.closes();
    if closes.len() < WINDOW_LEN {
        return Vec::new();
    }
    (0..=closes.len() - WINDOW_LEN)
        .map(|s| trend_slope(&closes[s..s + TREND_LOOKBACK], TREND_LOOKBACK).unwrap_or(0.0))
        .collect()
}

/// Derives cutoffs from a corpus: the 80th percentile of positive slopes and
/// of negative slope magnitudes, and the 75th/25th percentiles of bodies.
pub fn calibrate_thresholds(corpus: &OhlcSeries) -> Result<RuleThresholds> {
    let windows = corpus.len().saturating_sub(WINDOW_LEN - 1);
    if windows < MIN_CALIBRATION_WINDOWS {
        return Err(Error::InsufficientData(format!(
            "calibration needs {MIN_CALIBRATION_WINDOWS} windows, corpus yields {windows}"
        )));
    }
    let slopes = window_trend_slopes(corpus);
    let ups: Vec<f64> = slopes.iter().copied().filter(|s| *s > 0.0).collect();
    let downs: Vec<f64> = slopes.iter().filter(|s| **s < 0.0).map(|s| -s).collect();
    let magnitudes: Vec<f64> = slopes.iter().map(|s| s.abs()).collect();
    // a side with no slopes at all borrows the overall magnitude cutoff
    let side = |v: &[f64]| {
        if v.is_empty() {
            percentile(&magnitudes, TREND_PERCENTILE)
        } else {
            percentile(v, TREND_PERCENTILE)
        }
    };
    let bodies: Vec<f64> = corpus.candles().iter().map(Candle::body).collect();
    let mut sorted = bodies;
    sorted.sort_by(f64::total_cmp);
    RuleThresholds::new(
        side(&ups)?,
        side(&downs)?,
        percentile_sorted(&sorted, LONG_BODY_PERCENTILE),
        percentile_sorted(&sorted, SHORT_BODY_PERCENTILE),
    )
}

/// One of the three pattern bars, oldest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bar {
    First,
    Second,
    Third,
}

impl Bar {
    fn offset(self) -> usize {
        match self {
            Bar::First => 0,
            Bar::Second => 1,
            Bar::Third => 2,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Bar::First => "bar 1",
            Bar::Second => "bar 2",
            Bar::Third => "bar 3",
        }
    }
}

/// A single condition on the three pattern bars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clause {
    /// Strictly white or strictly black; a doji satisfies neither.
    Color(Bar, CandleColor),
    /// Body above the long-body cutoff.
    LongBody(Bar),
    /// Body below the short-body cutoff.
    ShortBody(Bar),
    /// Body bottom of the first bar at or above the body top of the second.
    BodyAtOrAbove(Bar, Bar),
    /// Body top of the first bar at or below the body bottom of the second.
    BodyAtOrBelow(Bar, Bar),
    CloseBelowMidpoint(Bar, Bar),
    CloseAboveMidpoint(Bar, Bar),
    CloseBelowBody(Bar, Bar),
    CloseAboveBody(Bar, Bar),
    /// First body reaches at least the other's top and extends below its bottom.
    EngulfsDownward(Bar, Bar),
    /// First body reaches at most the other's bottom and extends above its top.
    EngulfsUpward(Bar, Bar),
    /// First body lies within the other's body.
    InsideBody(Bar, Bar),
    /// The longer of the two shadows exceeds the long-body cutoff.
    LongShadow(Bar),
}

impl Clause {
    pub fn holds(&self, bars: &[Candle; 3], t: &RuleThresholds) -> bool {
        let b = |bar: Bar| &bars[bar.offset()];
        match *self {
            Clause::Color(x, color) => b(x).color() == color,
            Clause::LongBody(x) => b(x).body() > t.long_body_cutoff,
            Clause::ShortBody(x) => b(x).body() < t.short_body_cutoff,
            Clause::BodyAtOrAbove(x, y) => b(x).body_bottom() >= b(y).body_top(),
            Clause::BodyAtOrBelow(x, y) => b(x).body_top() <= b(y).body_bottom(),
            Clause::CloseBelowMidpoint(x, y) => b(x).close < b(y).body_mid(),
            Clause::CloseAboveMidpoint(x, y) => b(x).close > b(y).body_mid(),
            Clause::CloseBelowBody(x, y) => b(x).close < b(y).body_bottom(),
            Clause::CloseAboveBody(x, y) => b(x).close > b(y).body_top(),
            Clause::EngulfsDownward(x, y) => {
                b(x).body_top() >= b(y).body_top() && b(x).body_bottom() < b(y).body_bottom()
            }
            Clause::EngulfsUpward(x, y) => {
                b(x).body_bottom() <= b(y).body_bottom() && b(x).body_top() > b(y).body_top()
            }
            Clause::InsideBody(x, y) => {
                b(x).body_top() <= b(y).body_top() && b(x).body_bottom() >= b(y).body_bottom()
            }
            Clause::LongShadow(x) => {
                b(x).upper_shadow().max(b(x).lower_shadow()) > t.long_body_cutoff
            }
        }
    }

    /// The clause describing the same condition on price-mirrored bars.
    pub fn mirrored(&self) -> Clause {
        match *self {
            Clause::Color(x, CandleColor::White) => Clause::Color(x, CandleColor::Black),
            Clause::Color(x, CandleColor::Black) => Clause::Color(x, CandleColor::White),
            Clause::Color(x, CandleColor::Doji) => Clause::Color(x, CandleColor::Doji),
            Clause::BodyAtOrAbove(x, y) => Clause::BodyAtOrBelow(x, y),
            Clause::BodyAtOrBelow(x, y) => Clause::BodyAtOrAbove(x, y),
            Clause::CloseBelowMidpoint(x, y) => Clause::CloseAboveMidpoint(x, y),
            Clause::CloseAboveMidpoint(x, y) => Clause::CloseBelowMidpoint(x, y),
            Clause::CloseBelowBody(x, y) => Clause::CloseAboveBody(x, y),
            Clause::CloseAboveBody(x, y) => Clause::CloseBelowBody(x, y),
            Clause::EngulfsDownward(x, y) => Clause::EngulfsUpward(x, y),
            Clause::EngulfsUpward(x, y) => Clause::EngulfsDownward(x, y),
            c @ (Clause::LongBody(_)
            | Clause::ShortBody(_)
            | Clause::InsideBody(..)
            | Clause::LongShadow(_)) => c,
        }
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Clause::Color(x, CandleColor::White) => write!(f, "{} is white (close > open)", x.label()),
            Clause::Color(x, CandleColor::Black) => write!(f, "{} is black (close < open)", x.label()),
            Clause::Color(x, CandleColor::Doji) => write!(f, "{} is a doji (close = open)", x.label()),
            Clause::LongBody(x) => write!(f, "{} body > long_body_cutoff", x.label()),
            Clause::ShortBody(x) => write!(f, "{} body < short_body_cutoff", x.label()),
            Clause::BodyAtOrAbove(x, y) => {
                write!(f, "{} body bottom >= {} body top (gap up or touching)", x.label(), y.label())
            }
            Clause::BodyAtOrBelow(x, y) => write!(
                f,
                "{} body top <= {} body bottom (gap down or touching)",
                x.label(),
                y.label()
            ),
            Clause::CloseBelowMidpoint(x, y) => {
                write!(f, "{} close < midpoint of {} body", x.label(), y.label())
            }
            Clause::CloseAboveMidpoint(x, y) => {
                write!(f, "{} close > midpoint of {} body", x.label(), y.label())
            }
            Clause::CloseBelowBody(x, y) => write!(f, "{} close < {} body bottom", x.label(), y.label()),
            Clause::CloseAboveBody(x, y) => write!(f, "{} close > {} body top", x.label(), y.label()),
            Clause::EngulfsDownward(x, y) => write!(
                f,
                "{} body top >= {} body top and {} body bottom < {} body bottom",
                x.label(),
                y.label(),
                x.label(),
                y.label()
            ),
            Clause::EngulfsUpward(x, y) => write!(
                f,
                "{} body bottom <= {} body bottom and {} body top > {} body top",
                x.label(),
                y.label(),
                x.label(),
                y.label()
            ),
            Clause::InsideBody(x, y) => write!(f, "{} body lies within {} body", x.label(), y.label()),
            Clause::LongShadow(x) => write!(
                f,
                "{} longer shadow (upper or lower) > long_body_cutoff",
                x.label()
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternRule {
    pub class: PatternClass,
    pub trend: TrendDirection,
    pub clauses: Vec<Clause>,
}

/// Trend direction and three-bar clauses for each class.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternRuleSet {
    rules: Vec<PatternRule>,
}

impl Default for PatternRuleSet {
    fn default() -> Self {
        PatternRuleSet::standard()
    }
}

impl PatternRuleSet {
    /// The rule set used throughout the pipeline.
    pub fn standard() -> Self {
        use Bar::*;
        use CandleColor::{Black, White};
        use Clause::*;

        // bearish reversals; their bullish partners are mirror images
        let bearish = [
            (
                PatternClass::EveningStar,
                vec![
                    Color(First, White),
                    LongBody(First),
                    ShortBody(Second),
                    BodyAtOrAbove(Second, First),
                    Color(Third, Black),
                    CloseBelowMidpoint(Third, First),
                ],
            ),
            (
                PatternClass::BearishEngulfing,
                vec![
                    Color(First, White),
                    Color(Second, White),
                    Color(Third, Black),
                    LongBody(Third),
                    EngulfsDownward(Third, Second),
                ],
            ),
            (
                PatternClass::ShootingStar,
                vec![
                    Color(First, White),
                    ShortBody(Second),
                    BodyAtOrAbove(Second, First),
                    LongShadow(Second),
                    Color(Third, Black),
                    CloseBelowBody(Third, Second),
                ],
            ),
            (
                PatternClass::BearishHarami,
                vec![
                    Color(First, White),
                    Color(Second, White),
                    LongBody(Second),
                    Color(Third, Black),
                    ShortBody(Third),
                    InsideBody(Third, Second),
                ],
            ),
        ];

        let mut rules = Vec::with_capacity(PatternClass::COUNT);
        for (class, clauses) in bearish {
            let partner = class.mirror_partner();
            rules.push(PatternRule {
                class: partner,
                trend: partner.required_trend(),
                clauses: clauses.iter().map(Clause::mirrored).collect(),
            });
            rules.push(PatternRule {
                class,
                trend: class.required_trend(),
                clauses,
            });
        }
        rules.sort_by_key(|r| r.class);
        PatternRuleSet { rules }
    }

    pub fn rules(&self) -> &[PatternRule] {
        &self.rules
    }

    pub fn rule(&self, class: PatternClass) -> &PatternRule {
        &self.rules[class.index()]
    }

    /// Evaluates a class on a window of at least five bars: the trend over
    /// all bars but the last three, then every clause on the last three.
    pub fn matches(&self, window: &[Candle], class: PatternClass, t: &RuleThresholds) -> Result<bool> {
        if window.len() < MIN_MATCH_LEN {
            return Err(Error::invalid(format!(
                "pattern match needs at least {MIN_MATCH_LEN} bars, got {}",
                window.len()
            )));
        }
        let rule = self.rule(class);
        let trend = assess_trend(window, t)?;
        if trend.direction != rule.trend {
            return Ok(false);
        }
        Ok(rule.clauses.iter().all(|c| c.holds(last_three(window), t)))
    }

    /// Markdown listing of every class and clause.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str("# Pattern rules\n\n");
        out.push_str(
            "Each window is split into a trend segment (all bars except the last three) \
             and three pattern bars (bar 1 oldest, bar 3 newest).\n\n\
             - The trend slope is the least-squares slope of the segment's closes against \
             bar index, divided by the segment's mean close.\n\
             - Uptrend: slope > 0 and slope >= trend_cutoff_up (80th percentile of positive \
             slopes in the calibration corpus).\n\
             - Downtrend: slope < 0 and |slope| >= trend_cutoff_down (80th percentile of \
             negative slope magnitudes).\n\
             - long_body_cutoff / short_body_cutoff: 75th / 25th percentile of real-body \
             lengths in the calibration corpus.\n\
             - Percentiles interpolate linearly between closest ranks.\n\n",
        );
        for rule in &self.rules {
            let trend = match rule.trend {
                TrendDirection::Up => "uptrend",
                TrendDirection::Down => "downtrend",
                TrendDirection::None => "no trend",
            };
            let _ = writeln!(out, "## {} ({})\n", rule.class, rule.class.id());
            let _ = writeln!(out, "- trend: {trend}");
            for clause in &rule.clauses {
                let _ = writeln!(out, "- {clause}");
            }
            out.push('\n');
        }
        out
    }
}

fn last_three(window: &[Candle]) -> &[Candle; 3] {
    window[window.len() - PATTERN_BARS..]
        .try_into()
        .expect("window has at least three bars")
}

/// Slope and direction of a window's trend segment.
pub fn assess_trend(window: &[Candle], t: &RuleThresholds) -> Result<TrendAssessment> {
    if window.len() < MIN_MATCH_LEN {
        return Err(Error::invalid(format!(
            "trend needs at least {MIN_MATCH_LEN} bars, got {}",
            window.len()
        )));
    }
    let closes: Vec<f64> = window[..window.len() - PATTERN_BARS]
        .iter()
        .map(|c| c.close)
        .collect();
    let slope = trend_slope(&closes, closes.len())?;
    Ok(TrendAssessment {
        slope,
        direction: t.classify_slope(slope),
    })
}

/// `match_pattern` against the standard rule set.
pub fn match_pattern(window: &[Candle], class: PatternClass, t: &RuleThresholds) -> Result<bool> {
    PatternRuleSet::standard().matches(window, class, t)
}

/// Reflects a window's prices through the mean close of its trend segment,
/// turning uptrends into downtrends with the same slope magnitude.
pub fn mirror_window(window: &[Candle]) -> Result<Vec<Candle>> {
    if window.len() < MIN_MATCH_LEN {
        return Err(Error::invalid("window too short to mirror"));
    }
    let trend = &window[..window.len() - PATTERN_BARS];
    let mean = trend.iter().map(|c| c.close).sum::<f64>() / trend.len() as f64;
    let pivot = 2.0 * mean;
    let mirrored: Vec<Candle> = window.iter().map(|c| c.mirrored(pivot)).collect();
    for c in &mirrored {
        c.validate()?;
    }
    Ok(mirrored)
}
