//! Gramian Angular Field encoding.
//!
//! A series is min-max scaled into `[0, 1]`, each value is read as the
//! cosine of an angle `phi_i = arccos(x_i)`, and the field is the matrix of
//! `cos(phi_i + phi_j)`. The diagonal `cos(2 phi_i) = 2 x_i^2 - 1` inverts
//! back to the scaled series, so the encoding loses nothing but the scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ohlc::{to_culr, Candle, WINDOW_LEN};

/// Slack allowed when values computed in floating point fall just outside
/// their mathematical range.
pub const RANGE_TOLERANCE: f64 = 1e-9;

/// Values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    values: Vec<f64>,
}

impl NormalizedSeries {
    /// Accepts values within `RANGE_TOLERANCE` of `[0, 1]`, clamping them.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("normalized series is empty"));
        }
        let mut values = values;
        for v in values.iter_mut() {
            if !v.is_finite() || *v < -RANGE_TOLERANCE || *v > 1.0 + RANGE_TOLERANCE {
                return Err(Error::invalid(format!("value {v} outside [0, 1]")));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(NormalizedSeries { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Min-max scaling. A constant series maps to all `0.5`.
pub fn minmax_normalize(x: &[f64]) -> Result<NormalizedSeries> {
    if x.is_empty() {
        return Err(Error::invalid("cannot normalize an empty series"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contains a non-finite value"));
    }
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let values = if span > 0.0 {
        x.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; x.len()]
    };
    Ok(NormalizedSeries { values })
}

/// Square symmetric matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GafMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl GafMatrix {
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::shape(format!(
                "{} entries for a {n}x{n} matrix",
                entries.len()
            )));
        }
        Ok(GafMatrix { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }
}

/// Encodes through the angle form `cos(arccos x_i + arccos x_j)`.
pub fn gaf_encode(x: &NormalizedSeries) -> GafMatrix {
    let n = x.len();
    let phi: Vec<f64> = x.values().iter().map(|v| v.acos()).collect();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g = (phi[i] + phi[j]).cos();
            entries[i * n + j] = g;
            entries[j * n + i] = g;
        }
    }
    GafMatrix { n, entries }
}

/// Encodes through the inner-product form
/// `x x^T - sqrt(1 - x^2) sqrt(1 - x^2)^T`, which equals [`gaf_encode`] up
/// to rounding.
pub fn gaf_encode_gram(x: &NormalizedSeries) -> GafMatrix {
    let n = x.len();
    let s: Vec<f64> = x.values().iter().map(|v| (1.0 - v * v).max(0.0).sqrt()).collect();
    let v = x.values();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            entries[i * n + j] = v[i] * v[j] - s[i] * s[j];
        }
    }
    GafMatrix { n, entries }
}

/// Recovers the scaled series from the diagonal, `x_i = sqrt((g_ii + 1) / 2)`.
pub fn gaf_decode_diagonal(g: &GafMatrix) -> Result<NormalizedSeries> {
    let mut values = Vec::with_capacity(g.n());
    for (i, d) in g.diagonal().into_iter().enumerate() {
        if !d.is_finite() || !(-1.0 - RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&d) {
            return Err(Error::invalid(format!(
                "diagonal entry {i} = {d} outside [-1, 1]"
            )));
        }
        values.push(((d.clamp(-1.0, 1.0) + 1.0) / 2.0).sqrt());
    }
    NormalizedSeries::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    /// Open, high, low, close.
    Ohlc,
    /// Close, upper shadow, lower shadow, real body.
    Culr,
}

impl FeatureSet {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSet::Ohlc => "ohlc",
            FeatureSet::Culr => "culr",
        }
    }

    /// The four raw feature series of a window, in channel order.
    pub fn channels(self, window: &[Candle]) -> [Vec<f64>; 4] {
        match self {
            FeatureSet::Ohlc => [
                window.iter().map(|c| c.open).collect(),
                window.iter().map(|c| c.high).collect(),
                window.iter().map(|c| c.low).collect(),
                window.iter().map(|c| c.close).collect(),
            ],
            FeatureSet::Culr => {
                let bars: Vec<_> = window.iter().map(to_culr).collect();
                [
                    bars.iter().map(|b| b.close).collect(),
                    bars.iter().map(|b| b.upper_shadow).collect(),
                    bars.iter().map(|b| b.lower_shadow).collect(),
                    bars.iter().map(|b| b.real_body).collect(),
                ]
            }
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ohlc" => Ok(FeatureSet::Ohlc),
            "culr" => Ok(FeatureSet::Culr),
            other => Err(Error::invalid(format!("unknown feature set {other:?}"))),
        }
    }
}

/// Four equally sized GAF channels of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct GafTensor {
    channels: Vec<GafMatrix>,
    feature_set: FeatureSet,
}

impl GafTensor {
    pub const CHANNELS: usize = 4;

    pub fn new(channels: Vec<GafMatrix>, feature_set: FeatureSet) -> Result<Self> {
        if channels.len() != Self::CHANNELS {
            return Err(Error::shape(format!(
                "expected {} channels, got {}",
                Self::CHANNELS,
                channels.len()
            )));
        }
        let n = channels[0].n();
        if channels.iter().any(|c| c.n() != n) {
            return Err(Error::shape("channels differ in size"));
        }
        Ok(GafTensor {
            channels,
            feature_set,
        })
    }

    /// Rebuilds a tensor from a flat channel-major `C*N*N` buffer.
    pub fn from_flat(values: &[f64], n: usize, feature_set: FeatureSet) -> Result<Self> {
        if values.len() != Self::CHANNELS * n * n {
            return Err(Error::shape(format!(
                "{} values for a {}x{n}x{n} tensor",
                values.len(),
                Self::CHANNELS
            )));
        }
        let channels = values
            .chunks(n * n)
            .map(|c| GafMatrix::from_entries(n, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        GafTensor::new(channels, feature_set)
    }

    pub fn channels(&self) -> &[GafMatrix] {
        &self.channels
    }

    pub fn feature_set(&self) -> FeatureSet {
        self.feature_set
    }

    pub fn n(&self) -> usize {
        self.channels[0].n()
    }

    /// Channel-major `C*N*N` values.
    pub fn to_flat(&self) -> Vec<f64> {
        self.channels
            .iter()
            .flat_map(|c| c.entries().iter().copied())
            .collect()
    }
}

/// Encodes a 16-bar window, normalizing each channel over the window.
pub fn encode_window(window: &[Candle], feature_set: FeatureSet) -> Result<GafTensor> {
    if window.len() != WINDOW_LEN {
        return Err(Error::invalid(format!(
            "window must have {WINDOW_LEN} candles, got {}",
            window.len()
        )));
    }
    let channels = feature_set
        .channels(window)
        .iter()
        .map(|series| minmax_normalize(series).map(|x| gaf_encode(&x)))
        .collect::<Result<Vec<_>>>()?;
    GafTensor::new(channels, feature_set)
}
