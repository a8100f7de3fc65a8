//! Decoding detector outputs and moving-window streaming detection.

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::Serialize;

use crate::detector::{Detector, DetectorOutput};
use crate::error::{Error, Result};
use crate::gaf::{encode_window, FeatureSet, GafTensor};
use crate::ingest::CandleReader;
use crate::nn::Tensor4;
use crate::ohlc::{Candle, PatternClass, WINDOW_LEN};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A pattern occupying the last `window_size` bars up to `end_timestamp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: PatternClass,
    pub window_size: usize,
    /// Confidence of the chosen pair times the top class probability.
    pub score: f64,
    pub end_timestamp: i64,
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} not in [0, 1]")));
    }
    Ok(())
}

/// Picks the more confident pair and the top class; `None` below `threshold`.
pub fn decode(output: &DetectorOutput, threshold: f64, end_timestamp: i64) -> Option<Detection> {
    let pair = output.best_pair();
    let (class, p) = output.top_class();
    let score = output.pairs[pair].1 * p;
    (score >= threshold).then(|| Detection {
        class,
        window_size: output.predicted_window(),
        score,
        end_timestamp,
    })
}

/// The latest `WINDOW_LEN` candles of a stream.
#[derive(Debug, Clone, Default)]
pub struct WindowBuffer {
    candles: VecDeque<Candle>,
}

impl WindowBuffer {
    pub fn new() -> Self {
        WindowBuffer {
            candles: VecDeque::with_capacity(WINDOW_LEN),
        }
    }

    pub fn len(&self) -> usize {
        self.candles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candles.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.candles.len() == WINDOW_LEN
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.candles.back().map(|c| c.timestamp)
    }

    pub fn push(&mut self, candle: Candle) -> Result<()> {
        candle.validate()?;
        if let Some(last) = self.last_timestamp() {
            if candle.timestamp <= last {
                return Err(Error::Order {
                    last,
                    got: candle.timestamp,
                });
            }
        }
        if self.is_full() {
            self.candles.pop_front();
        }
        self.candles.push_back(candle);
        Ok(())
    }

    /// Oldest first.
    pub fn candles(&self) -> Vec<Candle> {
        self.candles.iter().copied().collect()
    }
}

/// Pushes `candle` and, once the buffer is full, runs the model on it.
pub fn step_output(
    buffer: &mut WindowBuffer,
    candle: Candle,
    model: &Detector,
    feature_set: FeatureSet,
) -> Result<Option<DetectorOutput>> {
    if feature_set != model.feature_set() {
        return Err(Error::invalid(format!(
            "model expects {} features, got {feature_set}",
            model.feature_set()
        )));
    }
    buffer.push(candle)?;
    if !buffer.is_full() {
        return Ok(None);
    }
    let tensor = encode_window(&buffer.candles(), feature_set)?;
    let x = Tensor4::new(
        [1, GafTensor::CHANNELS, WINDOW_LEN, WINDOW_LEN],
        tensor.to_flat(),
    )?;
    Ok(model.predict(&x)?.pop())
}

pub fn step(
    buffer: &mut WindowBuffer,
    candle: Candle,
    model: &Detector,
    feature_set: FeatureSet,
    threshold: f64,
) -> Result<Option<Detection>> {
    check_threshold(threshold)?;
    let ts = candle.timestamp;
    Ok(step_output(buffer, candle, model, feature_set)?.and_then(|out| decode(&out, threshold, ts)))
}

/// One stream's buffer bound to a model.
pub struct StreamingDetector<'a> {
    model: &'a Detector,
    buffer: WindowBuffer,
    threshold: f64,
}

impl<'a> StreamingDetector<'a> {
    pub fn new(model: &'a Detector, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        Ok(StreamingDetector {
            model,
            buffer: WindowBuffer::new(),
            threshold,
        })
    }

    pub fn push(&mut self, candle: Candle) -> Result<Option<Detection>> {
        step(&mut self.buffer, candle, self.model, self.model.feature_set(), self.threshold)
    }
}

/// Runs a CSV price stream through the detector, bar by bar.
pub fn detect_stream<R: Read>(reader: R, model: &Detector, threshold: f64) -> Result<Vec<Detection>> {
    let mut det = StreamingDetector::new(model, threshold)?;
    let mut out = Vec::new();
    for candle in CandleReader::new(reader)? {
        if let Some(d) = det.push(candle?)? {
            out.push(d);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct DetectionRow<'a> {
    end_timestamp: i64,
    class_name: &'a str,
    window_size: usize,
    score: f64,
}

pub fn write_detections<W: Write>(detections: &[Detection], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if detections.is_empty() {
        w.write_record(["end_timestamp", "class_name", "window_size", "score"])?;
    }
    for d in detections {
        w.serialize(DetectionRow {
            end_timestamp: d.end_timestamp,
            class_name: d.class.name(),
            window_size: d.window_size,
            score: d.score,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::detector::DetectorArchitecture;

    fn model() -> Detector {
        Detector::new(DetectorArchitecture::tiny(), FeatureSet::Ohlc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn series() -> Vec<Candle> {
        generate_synthetic(&SyntheticConfig {
            n_bars: 1000,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .into_inner()
    }

    #[test]
    fn decode_example() {
        let mut scores = [0.0; 8];
        scores[PatternClass::from_id(3).unwrap().index()] = 1.0;
        let out = DetectorOutput {
            pairs: [(0.5, 0.9), (0.7, 0.2)],
            class_scores: scores,
        };
        let d = decode(&out, 0.5, 42).unwrap();
        assert_eq!(d.class.id(), 3);
        assert_eq!(d.window_size, 8);
        assert_eq!(d.score, 0.9);
        assert_eq!(d.end_timestamp, 42);
        assert_eq!(decode(&out, 0.95, 42), None);
        assert_eq!(decode(&out, 0.5, 42), decode(&out, 0.5, 42));

        let top = DetectorOutput {
            pairs: [(1.0, 0.9), (0.1, 0.1)],
            class_scores: scores,
        };
        assert_eq!(decode(&top, 0.0, 0).unwrap().window_size, 16);
    }

    #[test]
    fn buffer_fills_then_slides() {
        let m = model();
        let s = series();
        let mut buf = WindowBuffer::new();
        for (i, c) in s.iter().take(15).enumerate() {
            assert_eq!(step(&mut buf, *c, &m, FeatureSet::Ohlc, 0.0).unwrap(), None);
            assert_eq!(buf.len(), i + 1);
        }
        let d = step(&mut buf, s[15], &m, FeatureSet::Ohlc, 0.0).unwrap().unwrap();
        assert_eq!(d.end_timestamp, s[15].timestamp);
        step(&mut buf, s[16], &m, FeatureSet::Ohlc, 0.0).unwrap();
        assert_eq!(buf.len(), 16);
        assert_eq!(buf.candles()[0], s[1]);
        assert!(matches!(buf.push(s[3]), Err(Error::Order { .. })));
        assert!(step(&mut buf, s[17], &m, FeatureSet::Culr, 0.0).is_err());
        assert!(step(&mut buf, s[17], &m, FeatureSet::Ohlc, 1.5).is_err());
    }

    #[test]
    fn streaming_matches_batch_encoding() {
        let m = model();
        let s = series();
        let mut buf = WindowBuffer::new();
        for (i, c) in s.iter().take(60).enumerate() {
            let streamed = step_output(&mut buf, *c, &m, FeatureSet::Ohlc).unwrap();
            if i < 15 {
                assert!(streamed.is_none());
                continue;
            }
            let t = encode_window(&s[i - 15..=i], FeatureSet::Ohlc).unwrap();
            let x = Tensor4::new([1, 4, 16, 16], t.to_flat()).unwrap();
            let batch = m.predict(&x).unwrap().pop().unwrap();
            let streamed = streamed.unwrap();
            for k in 0..2 {
                assert!((streamed.pairs[k].0 - batch.pairs[k].0).abs() <= 1e-12);
                assert!((streamed.pairs[k].1 - batch.pairs[k].1).abs() <= 1e-12);
            }
            for (a, b) in streamed.class_scores.iter().zip(batch.class_scores) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn replay_is_deterministic_and_csv_has_header() {
        let m = model();
        let mut csv_in = Vec::new();
        crate::ingest::write_series(&crate::ohlc::OhlcSeries::new(series()).unwrap(), &mut csv_in).unwrap();
        let a = detect_stream(csv_in.as_slice(), &m, 0.0).unwrap();
        let b = detect_stream(csv_in.as_slice(), &m, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000 - 15);
        let mut out = Vec::new();
        write_detections(&a[..2], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "end_timestamp,class_name,window_size,score");
        assert_eq!(lines.len(), 3);
        let mut empty = Vec::new();
        write_detections(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "end_timestamp,class_name,window_size,score\n");
    }
}
