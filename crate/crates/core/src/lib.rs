//! Candlestick pattern detection on Gramian Angular Field encodings.
//!
//! The pipeline turns OHLC candles into four-channel GAF tensors, labels a
//! detection dataset with rule-based patterns and DTW similarity, and trains
//! a small single-cell YOLO-style network that predicts a pattern class and
//! how many trailing bars the pattern spans.

pub mod dataset;
pub mod detector;
pub mod dtw;
pub mod error;
pub mod evalcli;
pub mod gaf;
pub mod infer;
pub mod ingest;
pub mod nn;
pub mod ohlc;
pub mod rules;

pub use error::{Error, Result};
