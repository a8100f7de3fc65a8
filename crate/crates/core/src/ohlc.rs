//! Candles, series and pattern labels shared by the whole pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bars in every encoded window.
pub const WINDOW_LEN: usize = 16;
/// Smallest pattern width a detection can report.
pub const MIN_WINDOW_SIZE: usize = 5;
/// Largest pattern width, the whole window.
pub const MAX_WINDOW_SIZE: usize = WINDOW_LEN;

/// One OHLC bar. Timestamps are epoch milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candle {
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandleColor {
    White,
    Black,
    Doji,
}

impl CandleColor {
    /// Color used by the reversal scan, where a doji counts as black.
    pub fn reversal_color(self) -> CandleColor {
        match self {
            CandleColor::Doji => CandleColor::Black,
            c => c,
        }
    }
}

impl Candle {
    /// Builds a candle, rejecting non-finite or non-positive prices and
    /// highs/lows that do not bracket the body.
    pub fn new(timestamp: i64, open: f64, high: f64, low: f64, close: f64) -> Result<Self> {
        let c = Candle {
            timestamp,
            open,
            high,
            low,
            close,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::invalid(format!(
                "candle at {} has a non-positive or non-finite price",
                self.timestamp
            )));
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(Error::invalid(format!(
                "candle at {}: low/high do not bracket open/close",
                self.timestamp
            )));
        }
        Ok(())
    }

    pub fn color(&self) -> CandleColor {
        candle_color(self)
    }

    pub fn body(&self) -> f64 {
        (self.close - self.open).abs()
    }

    pub fn body_top(&self) -> f64 {
        self.open.max(self.close)
    }

    pub fn body_bottom(&self) -> f64 {
        self.open.min(self.close)
    }

    pub fn body_mid(&self) -> f64 {
        0.5 * (self.open + self.close)
    }

    pub fn upper_shadow(&self) -> f64 {
        self.high - self.body_top()
    }

    pub fn lower_shadow(&self) -> f64 {
        self.body_bottom() - self.low
    }

    /// Reflects all prices through `pivot / 2`: `p -> pivot - p`. High and
    /// low trade places so the result is again a valid candle.
    pub fn mirrored(&self, pivot: f64) -> Candle {
        Candle {
            timestamp: self.timestamp,
            open: pivot - self.open,
            high: pivot - self.low,
            low: pivot - self.high,
            close: pivot - self.close,
        }
    }
}

pub fn candle_color(c: &Candle) -> CandleColor {
    if c.close > c.open {
        CandleColor::White
    } else if c.close < c.open {
        CandleColor::Black
    } else {
        CandleColor::Doji
    }
}

/// Close, upper shadow, lower shadow and real body of one bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CulrBar {
    pub close: f64,
    pub upper_shadow: f64,
    pub lower_shadow: f64,
    pub real_body: f64,
}

pub fn to_culr(c: &Candle) -> CulrBar {
    CulrBar {
        close: c.close,
        upper_shadow: c.upper_shadow(),
        lower_shadow: c.lower_shadow(),
        real_body: c.body(),
    }
}

/// Chronologically ordered, validated candles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OhlcSeries {
    candles: Vec<Candle>,
}

impl OhlcSeries {
    pub fn new(candles: Vec<Candle>) -> Result<Self> {
        for c in &candles {
            c.validate()?;
        }
        if let Some(pair) = candles.windows(2).find(|p| p[1].timestamp <= p[0].timestamp) {
            return Err(Error::Order {
                last: pair[0].timestamp,
                got: pair[1].timestamp,
            });
        }
        Ok(OhlcSeries { candles })
    }

    pub fn candles(&self) -> &[Candle] {
        &self.candles
    }

    pub fn len(&self) -> usize {
        self.candles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candles.is_empty()
    }

    pub fn into_inner(self) -> Vec<Candle> {
        self.candles
    }

    pub fn closes(&self) -> Vec<f64> {
        self.candles.iter().map(|c| c.close).collect()
    }

    /// Copies `len` candles starting at `start` into a new series.
    pub fn window(&self, start: usize, len: usize) -> Result<OhlcSeries> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.candles.len())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "window {start}+{len} exceeds series of {}",
                    self.candles.len()
                ))
            })?;
        Ok(OhlcSeries {
            candles: self.candles[start..end].to_vec(),
        })
    }

    /// Median spacing between consecutive timestamps, in milliseconds.
    pub fn bar_interval_ms(&self) -> Option<i64> {
        let mut gaps: Vec<i64> = self
            .candles
            .windows(2)
            .map(|p| p[1].timestamp - p[0].timestamp)
            .collect();
        if gaps.is_empty() {
            return None;
        }
        gaps.sort_unstable();
        Some(gaps[gaps.len() / 2])
    }
}

/// Required direction of the trend segment preceding a pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrendDirection {
    Up,
    Down,
    None,
}

impl TrendDirection {
    pub fn opposite(self) -> TrendDirection {
        match self {
            TrendDirection::Up => TrendDirection::Down,
            TrendDirection::Down => TrendDirection::Up,
            TrendDirection::None => TrendDirection::None,
        }
    }
}

/// The eight detected pattern classes, numbered 1..=8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatternClass {
    MorningStar,
    EveningStar,
    BullishEngulfing,
    BearishEngulfing,
    ShootingStar,
    InvertedHammer,
    BullishHarami,
    BearishHarami,
}

impl PatternClass {
    pub const COUNT: usize = 8;

    pub const ALL: [PatternClass; 8] = [
        PatternClass::MorningStar,
        PatternClass::EveningStar,
        PatternClass::BullishEngulfing,
        PatternClass::BearishEngulfing,
        PatternClass::ShootingStar,
        PatternClass::InvertedHammer,
        PatternClass::BullishHarami,
        PatternClass::BearishHarami,
    ];

    pub fn id(self) -> u8 {
        self.index() as u8 + 1
    }

    /// Zero-based position, `id() - 1`.
    pub fn index(self) -> usize {
        PatternClass::ALL
            .iter()
            .position(|&c| c == self)
            .expect("class listed in ALL")
    }

    pub fn from_id(id: u8) -> Result<PatternClass> {
        match id {
            1..=8 => Ok(PatternClass::ALL[id as usize - 1]),
            _ => Err(Error::invalid(format!("pattern class id {id} not in 1..=8"))),
        }
    }

    pub fn from_index(index: usize) -> Result<PatternClass> {
        PatternClass::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::invalid(format!("pattern class index {index} not in 0..8")))
    }

    pub fn name(self) -> &'static str {
        match self {
            PatternClass::MorningStar => "MorningStar",
            PatternClass::EveningStar => "EveningStar",
            PatternClass::BullishEngulfing => "BullishEngulfing",
            PatternClass::BearishEngulfing => "BearishEngulfing",
            PatternClass::ShootingStar => "ShootingStar",
            PatternClass::InvertedHammer => "InvertedHammer",
            PatternClass::BullishHarami => "BullishHarami",
            PatternClass::BearishHarami => "BearishHarami",
        }
    }

    /// Bullish reversals follow a downtrend, bearish ones an uptrend.
    pub fn is_bullish(self) -> bool {
        matches!(
            self,
            PatternClass::MorningStar
                | PatternClass::BullishEngulfing
                | PatternClass::InvertedHammer
                | PatternClass::BullishHarami
        )
    }

    pub fn required_trend(self) -> TrendDirection {
        if self.is_bullish() {
            TrendDirection::Down
        } else {
            TrendDirection::Up
        }
    }

    /// The class this one turns into under a price mirror.
    pub fn mirror_partner(self) -> PatternClass {
        match self {
            PatternClass::MorningStar => PatternClass::EveningStar,
            PatternClass::EveningStar => PatternClass::MorningStar,
            PatternClass::BullishEngulfing => PatternClass::BearishEngulfing,
            PatternClass::BearishEngulfing => PatternClass::BullishEngulfing,
            PatternClass::ShootingStar => PatternClass::InvertedHammer,
            PatternClass::InvertedHammer => PatternClass::ShootingStar,
            PatternClass::BullishHarami => PatternClass::BearishHarami,
            PatternClass::BearishHarami => PatternClass::BullishHarami,
        }
    }
}

impl fmt::Display for PatternClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatternClass::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown pattern class {s:?}")))
    }
}

/// A 16-bar window whose last `window_size` bars hold one pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    window: OhlcSeries,
    class: PatternClass,
    window_size: usize,
}

impl LabeledSample {
    pub fn new(window: OhlcSeries, class: PatternClass, window_size: usize) -> Result<Self> {
        if window.len() != WINDOW_LEN {
            return Err(Error::invalid(format!(
                "labeled window must have {WINDOW_LEN} candles, got {}",
                window.len()
            )));
        }
        if !(MIN_WINDOW_SIZE..=MAX_WINDOW_SIZE).contains(&window_size) {
            return Err(Error::invalid(format!(
                "window size {window_size} outside {MIN_WINDOW_SIZE}..={MAX_WINDOW_SIZE}"
            )));
        }
        Ok(LabeledSample {
            window,
            class,
            window_size,
        })
    }

    pub fn window(&self) -> &OhlcSeries {
        &self.window
    }

    pub fn class(&self) -> PatternClass {
        self.class
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    /// Timestamp of the most recent bar.
    pub fn end_timestamp(&self) -> i64 {
        self.window.candles()[WINDOW_LEN - 1].timestamp
    }

    /// The bars covered by the pattern.
    pub fn pattern_bars(&self) -> &[Candle] {
        &self.window.candles()[WINDOW_LEN - self.window_size..]
    }
}
