//! CSV reading and writing for `timestamp,open,high,low,close` files.
//!
//! The timestamp column is either integer epoch milliseconds or an ISO-8601
//! UTC instant. The format is decided once per file from the first data row;
//! a later row in the other format is an error.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use crate::error::{Error, Result};
use crate::ohlc::{Candle, OhlcSeries};

const HEADER: [&str; 5] = ["timestamp", "open", "high", "low", "close"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampFormat {
    EpochMillis,
    Iso8601,
}

fn parse_iso(field: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(field) {
        return Some(dt.timestamp_millis());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(field, fmt) {
            return Some(naive.and_utc().timestamp_millis());
        }
    }
    None
}

/// Detects the timestamp format from a single field.
pub fn detect_timestamp_format(field: &str) -> Result<TimestampFormat> {
    let field = field.trim();
    if field.parse::<i64>().is_ok() {
        Ok(TimestampFormat::EpochMillis)
    } else if parse_iso(field).is_some() {
        Ok(TimestampFormat::Iso8601)
    } else {
        Err(Error::format("timestamp", field.to_string()))
    }
}

fn parse_timestamp(field: &str, format: TimestampFormat) -> Result<i64> {
    let field = field.trim();
    let parsed = match format {
        TimestampFormat::EpochMillis => field.parse::<i64>().ok(),
        TimestampFormat::Iso8601 => parse_iso(field),
    };
    parsed.ok_or_else(|| {
        Error::format(
            "timestamp",
            format!("{field:?} does not match the file's {format:?} timestamps"),
        )
    })
}

fn parse_price(field: &str, column: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::format("price", format!("column {column}: {field:?}")))
}

/// Incremental reader yielding one validated candle per data row.
pub struct CandleReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    format: Option<TimestampFormat>,
    last: Option<i64>,
    line: usize,
}

impl<R: Read> CandleReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let names: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
        if names != HEADER {
            return Err(Error::format(
                "csv header",
                format!("expected {}, got {}", HEADER.join(","), names.join(",")),
            ));
        }
        Ok(CandleReader {
            records: rdr.into_records(),
            format: None,
            last: None,
            line: 1,
        })
    }

    fn parse_record(&mut self, record: &csv::StringRecord) -> Result<Candle> {
        if record.len() != 5 {
            return Err(Error::format(
                "csv row",
                format!("line {}: expected 5 fields, got {}", self.line, record.len()),
            ));
        }
        let format = match self.format {
            Some(f) => f,
            None => {
                let f = detect_timestamp_format(&record[0])?;
                self.format = Some(f);
                f
            }
        };
        let candle = Candle::new(
            parse_timestamp(&record[0], format)?,
            parse_price(&record[1], "open")?,
            parse_price(&record[2], "high")?,
            parse_price(&record[3], "low")?,
            parse_price(&record[4], "close")?,
        )
        .map_err(|e| Error::format("csv row", format!("line {}: {e}", self.line)))?;
        if let Some(last) = self.last {
            if candle.timestamp <= last {
                return Err(Error::Order {
                    last,
                    got: candle.timestamp,
                });
            }
        }
        self.last = Some(candle.timestamp);
        Ok(candle)
    }
}

impl<R: Read> Iterator for CandleReader<R> {
    type Item = Result<Candle>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = self.records.next()?;
        self.line += 1;
        Some(record.map_err(Error::from).and_then(|r| self.parse_record(&r)))
    }
}

pub fn read_series<R: Read>(reader: R) -> Result<OhlcSeries> {
    let candles = CandleReader::new(reader)?.collect::<Result<Vec<_>>>()?;
    OhlcSeries::new(candles)
}

pub fn read_csv(path: &Path) -> Result<OhlcSeries> {
    read_series(File::open(path)?)
}

/// Writes a series with epoch-millisecond timestamps. Prices use the
/// shortest representation that parses back to the same double.
pub fn write_series<W: Write>(series: &OhlcSeries, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(HEADER)?;
    for c in series.candles() {
        wtr.write_record([
            c.timestamp.to_string(),
            c.open.to_string(),
            c.high.to_string(),
            c.low.to_string(),
            c.close.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv(series: &OhlcSeries, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(File::create(path)?);
    write_series(series, file)
}
