//! Dynamic time warping with absolute-difference local cost.

use crate::error::{Error, Result};
use crate::gaf::{minmax_normalize, FeatureSet};
use crate::ohlc::Candle;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DtwResult {
    pub distance: f64,
}

/// Unconstrained DTW: `D(i, j) = |a_i - b_j| + min(D(i-1, j), D(i, j-1), D(i-1, j-1))`.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<DtwResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw needs two non-empty sequences"));
    }
    let mut scratch = Vec::new();
    let distance = dtw_bounded(a, b, f64::INFINITY, &mut scratch).expect("unbounded dtw");
    Ok(DtwResult { distance })
}

/// Rolling-row DTW that gives up once every cell of a row exceeds `bound`,
/// returning `None` because the final cost can only be larger.
fn dtw_bounded(a: &[f64], b: &[f64], bound: f64, scratch: &mut Vec<f64>) -> Option<f64> {
    let m = b.len();
    scratch.clear();
    scratch.resize(2 * m, 0.0);
    let (prev, cur) = scratch.split_at_mut(m);

    let mut acc = 0.0;
    for (j, &bj) in b.iter().enumerate() {
        acc += (a[0] - bj).abs();
        prev[j] = acc;
    }
    if prev.iter().all(|&v| v > bound) {
        return None;
    }
    for &ai in &a[1..] {
        cur[0] = prev[0] + (ai - b[0]).abs();
        let mut row_min = cur[0];
        for j in 1..m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = best + (ai - b[j]).abs();
            row_min = row_min.min(cur[j]);
        }
        if row_min > bound {
            return None;
        }
        prev.copy_from_slice(cur);
    }
    Some(prev[m - 1])
}

fn corner_bound(a: &[f64], b: &[f64]) -> f64 {
    let first = (a[0] - b[0]).abs();
    if a.len() == 1 && b.len() == 1 {
        first
    } else {
        first + (a[a.len() - 1] - b[b.len() - 1]).abs()
    }
}

/// The four min-max normalized OHLC channels of a window, ready for
/// repeated distance queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProfile {
    channels: [Vec<f64>; 4],
}

impl ChannelProfile {
    pub fn from_window(window: &[Candle]) -> Result<Self> {
        if window.is_empty() {
            return Err(Error::invalid("dtw profile of an empty window"));
        }
        let raw = FeatureSet::Ohlc.channels(window);
        let mut channels: [Vec<f64>; 4] = Default::default();
        for (dst, src) in channels.iter_mut().zip(raw.iter()) {
            *dst = minmax_normalize(src)?.values().to_vec();
        }
        Ok(ChannelProfile { channels })
    }

    pub fn channels(&self) -> &[Vec<f64>; 4] {
        &self.channels
    }

    pub fn distance(&self, other: &ChannelProfile) -> f64 {
        let mut scratch = Vec::new();
        self.distance_below(other, f64::INFINITY, &mut scratch)
            .expect("unbounded distance")
    }

    /// Summed per-channel DTW, or `None` once the partial sum passes `bound`.
    pub fn distance_below(
        &self,
        other: &ChannelProfile,
        bound: f64,
        scratch: &mut Vec<f64>,
    ) -> Option<f64> {
        // every warping path visits both corner cells
        let corners: f64 = self
            .channels
            .iter()
            .zip(other.channels.iter())
            .map(|(a, b)| corner_bound(a, b))
            .sum();
        if corners > bound {
            return None;
        }
        let mut total = 0.0;
        for (a, b) in self.channels.iter().zip(other.channels.iter()) {
            total += dtw_bounded(a, b, bound - total, scratch)?;
            if total > bound {
                return None;
            }
        }
        Some(total)
    }
}

/// Sum of the four per-channel DTW distances between two windows, each
/// channel min-max normalized over its own window first.
pub fn multichannel_dtw(a: &[Candle], b: &[Candle]) -> Result<f64> {
    Ok(ChannelProfile::from_window(a)?.distance(&ChannelProfile::from_window(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimum over every monotone warping path, by plain recursion.
    fn oracle(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
        let cost = (a[i] - b[j]).abs();
        if i == 0 && j == 0 {
            return cost;
        }
        let mut best = f64::INFINITY;
        if i > 0 {
            best = best.min(oracle(a, b, i - 1, j));
        }
        if j > 0 {
            best = best.min(oracle(a, b, i, j - 1));
        }
        if i > 0 && j > 0 {
            best = best.min(oracle(a, b, i - 1, j - 1));
        }
        cost + best
    }

    #[test]
    fn examples() {
        assert_eq!(dtw_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().distance, 0.0);
        assert_eq!(dtw_distance(&[0.0], &[5.0]).unwrap().distance, 5.0);
        assert_eq!(dtw_distance(&[1.0, 2.0, 3.0], &[2.0, 2.0, 3.0]).unwrap().distance, 1.0);
        assert_eq!(oracle(&[1.0, 2.0, 3.0], &[2.0, 2.0, 3.0], 2, 2), 1.0);
        assert!(dtw_distance(&[], &[1.0]).is_err());
        assert!(dtw_distance(&[1.0], &[]).is_err());
    }

    fn bar(t: i64, o: f64, h: f64, l: f64, c: f64) -> Candle {
        Candle::new(t, o, h, l, c).unwrap()
    }

    #[test]
    fn multichannel_examples() {
        let a: Vec<Candle> = (0..8)
            .map(|i| {
                let x = 1.0 + 0.1 * (i as f64).sin();
                bar(i, x, x + 0.05, x - 0.05, x + 0.01)
            })
            .collect();
        assert_eq!(multichannel_dtw(&a, &a).unwrap(), 0.0);

        // only the high channel differs
        let mut b = a.clone();
        for (i, c) in b.iter_mut().enumerate() {
            c.high += 0.03 * (i % 3) as f64;
        }
        let highs_a: Vec<f64> = a.iter().map(|c| c.high).collect();
        let highs_b: Vec<f64> = b.iter().map(|c| c.high).collect();
        let expected = dtw_distance(
            minmax_normalize(&highs_a).unwrap().values(),
            minmax_normalize(&highs_b).unwrap().values(),
        )
        .unwrap()
        .distance;
        let d = multichannel_dtw(&a, &b).unwrap();
        assert!(expected > 0.0);
        assert_eq!(d, expected);
        assert_eq!(multichannel_dtw(&b, &a).unwrap(), d);
        assert!(multichannel_dtw(&[], &a).is_err());
    }

    #[test]
    fn bounded_search_agrees_when_not_abandoned() {
        let a = [0.0, 0.3, 0.9, 1.0, 0.2];
        let b = [0.1, 0.8, 0.7, 0.0];
        let full = dtw_distance(&a, &b).unwrap().distance;
        let mut s = Vec::new();
        assert_eq!(dtw_bounded(&a, &b, full, &mut s), Some(full));
        assert_eq!(dtw_bounded(&a, &b, full * 0.5, &mut s), None);
    }

    proptest! {
        #[test]
        fn matches_recursive_oracle(
            a in prop::collection::vec(0u8..3, 1..=6),
            b in prop::collection::vec(0u8..3, 1..=6),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let d = dtw_distance(&a, &b).unwrap().distance;
            prop_assert_eq!(d, oracle(&a, &b, a.len() - 1, b.len() - 1));
        }

        #[test]
        fn nonnegative_symmetric_and_zero_on_self(
            a in prop::collection::vec(-5.0f64..5.0, 1..20),
            b in prop::collection::vec(-5.0f64..5.0, 1..20),
        ) {
            let ab = dtw_distance(&a, &b).unwrap().distance;
            let ba = dtw_distance(&b, &a).unwrap().distance;
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert_eq!(dtw_distance(&a, &a).unwrap().distance, 0.0);
        }
    }
}
