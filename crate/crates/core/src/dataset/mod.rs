//! Labeled dataset construction and its on-disk container.
//!
//! A dataset directory holds `manifest.json` and `records.bin`. The binary
//! file is `"GAFD"`, a `u32` version and a `u32` record count, then per
//! record: class id `u8`, window size `u8`, split `u8` (0 train, 1 val,
//! 2 test), end timestamp `i64`, 16 candles as `f64` open/high/low/close,
//! and the `4 x 16 x 16` GAF tensor as `f32`. Everything is little-endian.

mod build;
mod synthetic;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::Example;
use crate::error::{Error, Result};
use crate::gaf::{encode_window, FeatureSet, GafTensor};
use crate::ohlc::{Candle, LabeledSample, OhlcSeries, PatternClass, MIN_WINDOW_SIZE, WINDOW_LEN};
use crate::rules::RuleThresholds;

pub use build::{
    assign_window_size, build_dataset, collect_similar, find_matches, resolve_candidates,
    select_top_targets, top_targets, Candidate, Collection, Dataset, DatasetConfig, RuleMatch,
    DEDUP_GAP, DEFAULT_DTW_PERCENTILE, REVERSAL_SCAN_START, TARGETS_PER_CLASS, TRAIN_FRACTION,
    VAL_FRACTION,
};
pub use synthetic::{
    generate_synthetic, SyntheticConfig, MIN_SYNTHETIC_BARS, SUB_STEPS, SYNTHETIC_BAR_MS,
    SYNTHETIC_START_MS,
};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.bin";
const MAGIC: &[u8; 4] = b"GAFD";
const TENSOR_LEN: usize = GafTensor::CHANNELS * WINDOW_LEN * WINDOW_LEN;
const RECORD_BYTES: usize = 3 + 8 + WINDOW_LEN * 4 * 8 + TENSOR_LEN * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Split> {
        Split::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::format("dataset records", format!("split tag {tag}")))
    }
}

/// Where the raw series came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic(SyntheticConfig),
    Csv { sha256: String },
}

impl Provenance {
    pub fn csv_file(path: &Path) -> Result<Provenance> {
        let bytes = fs::read(path)?;
        Ok(Provenance::Csv {
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub id: u8,
    pub rule_matches: usize,
    pub target_end_timestamps: Vec<i64>,
    pub dtw_threshold: f64,
    pub collected: usize,
    pub after_dedup: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// End timestamps of the first and last record of each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub train_start: i64,
    pub train_end: i64,
    pub val_start: i64,
    pub val_end: i64,
    pub test_start: i64,
    pub test_end: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub feature_set: FeatureSet,
    pub provenance: Provenance,
    pub n_bars: usize,
    pub bar_interval_ms: i64,
    pub thresholds: RuleThresholds,
    pub dtw_percentile: f64,
    pub targets_per_class: usize,
    pub max_per_class: Option<usize>,
    pub per_class_cap: usize,
    pub classes: Vec<ClassSummary>,
    /// Train, validation and test record counts.
    pub split_counts: [usize; 3],
    pub split_boundaries: SplitBoundaries,
    /// Counts for window sizes 5 through 16.
    pub window_size_histogram: Vec<usize>,
    pub record_count: usize,
    pub records_file: String,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Checks the manifest's summary fields against a set of records.
    pub fn check_records(&self, records: &[SampleRecord]) -> Result<()> {
        let bad = |d: String| Err(Error::format("dataset", d));
        if records.len() != self.record_count {
            return bad(format!("{} records, manifest says {}", records.len(), self.record_count));
        }
        for (k, split) in Split::ALL.iter().enumerate() {
            let n = records.iter().filter(|r| r.split == *split).count();
            if n != self.split_counts[k] {
                return bad(format!("{split:?} has {n} records, manifest says {}", self.split_counts[k]));
            }
        }
        for summary in &self.classes {
            let class = PatternClass::from_id(summary.id)?;
            let n = |s: Split| records.iter().filter(|r| r.sample.class() == class && r.split == s).count();
            if [n(Split::Train), n(Split::Val), n(Split::Test)] != [summary.train, summary.val, summary.test] {
                return bad(format!("class counts for {class} disagree with the records"));
            }
        }
        let mut hist = vec![0usize; self.window_size_histogram.len()];
        for r in records {
            if let Some(h) = hist.get_mut(r.sample.window_size() - MIN_WINDOW_SIZE) {
                *h += 1;
            }
        }
        if hist != self.window_size_histogram {
            return bad("window size histogram disagrees with the records".into());
        }
        let b = &self.split_boundaries;
        if !(b.train_start <= b.train_end && b.train_end < b.val_start && b.val_start <= b.val_end
            && b.val_end < b.test_start && b.test_start <= b.test_end)
        {
            return bad("split boundaries are not increasing".into());
        }
        Ok(())
    }
}

/// A labeled window with its stored tensor and split.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample: LabeledSample,
    pub split: Split,
    /// Flattened GAF tensor in single precision, as stored on disk.
    pub tensor: Vec<f32>,
}

impl SampleRecord {
    pub fn tensor_f64(&self) -> Vec<f64> {
        self.tensor.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_example(&self) -> Example {
        Example {
            input: self.tensor_f64(),
            class: self.sample.class(),
            window_size: self.sample.window_size(),
        }
    }

    /// Whether the stored tensor is exactly a fresh encoding of the window
    /// rounded to single precision.
    pub fn tensor_matches(&self, feature_set: FeatureSet) -> Result<bool> {
        let fresh = encode_window(self.sample.window().candles(), feature_set)?.to_flat();
        Ok(fresh.len() == self.tensor.len()
            && fresh.iter().zip(&self.tensor).all(|(a, b)| (*a as f32).to_bits() == b.to_bits()))
    }
}

pub fn records_in(records: &[SampleRecord], split: Split) -> Vec<&SampleRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

pub fn write_records<W: Write>(records: &[SampleRecord], mut w: W) -> Result<()> {
    let count = u32::try_from(records.len()).map_err(|_| Error::invalid("too many records"))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for r in records {
        if r.tensor.len() != TENSOR_LEN {
            return Err(Error::shape(format!("record tensor has {} values", r.tensor.len())));
        }
        w.write_all(&[r.sample.class().id(), r.sample.window_size() as u8, r.split.tag()])?;
        w.write_all(&r.sample.end_timestamp().to_le_bytes())?;
        for c in r.sample.window().candles() {
            for v in [c.open, c.high, c.low, c.close] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &r.tensor {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parses a records file; candle timestamps are rebuilt from the end
/// timestamp and the bar interval.
pub fn read_records(bytes: &[u8], bar_interval_ms: i64) -> Result<Vec<SampleRecord>> {
    let bad = |d: &str| Error::format("dataset records", d.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing GAFD header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_at(8) as usize;
    let body = &bytes[12..];
    if body.len() != count * RECORD_BYTES {
        return Err(bad("record count does not match the file size"));
    }
    let mut out = Vec::with_capacity(count);
    for chunk in body.chunks_exact(RECORD_BYTES) {
        let class = PatternClass::from_id(chunk[0])?;
        let w = chunk[1] as usize;
        let split = Split::from_tag(chunk[2])?;
        let end = i64::from_le_bytes(chunk[3..11].try_into().expect("8 bytes"));
        let f64_at = |i: usize| f64::from_le_bytes(chunk[i..i + 8].try_into().expect("8 bytes"));
        let mut candles = Vec::with_capacity(WINDOW_LEN);
        for k in 0..WINDOW_LEN {
            let o = 11 + k * 32;
            let ts = end - (WINDOW_LEN - 1 - k) as i64 * bar_interval_ms;
            candles.push(Candle::new(ts, f64_at(o), f64_at(o + 8), f64_at(o + 16), f64_at(o + 24))?);
        }
        let t0 = 11 + WINDOW_LEN * 32;
        let tensor = chunk[t0..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(SampleRecord {
            sample: LabeledSample::new(OhlcSeries::new(candles)?, class, w)?,
            split,
            tensor,
        });
    }
    Ok(out)
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.manifest.check_records(&dataset.records)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), dataset.manifest.to_json()?)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(&dataset.manifest.records_file))?);
    write_records(&dataset.records, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format("dataset", format!("unsupported version {}", manifest.format_version)));
    }
    let bytes = fs::read(dir.join(&manifest.records_file))?;
    let records = read_records(&bytes, manifest.bar_interval_ms)?;
    manifest.check_records(&records)?;
    Ok(Dataset { manifest, records })
}

#[cfg(test)]
mod tests;
