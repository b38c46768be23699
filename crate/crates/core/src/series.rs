//! Univariate series, standard scaling, left padding and training windows.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the standard deviation so constant series stay finite.
pub const STD_GUARD: f64 = 1e-6;

/// A univariate series with finite values and at least one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    pub freq: String,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<String>>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, freq: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if values.is_empty() {
            return Err(Error::TooShort { id, len: 0, min: 1 });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { id, index });
        }
        Ok(TimeSeries {
            id,
            freq: freq.into(),
            values,
            timestamps: None,
        })
    }

    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self> {
        if timestamps.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                actual: timestamps.len(),
            });
        }
        self.timestamps = Some(timestamps);
        Ok(self)
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

/// Result of [`standard_scale`].
#[derive(Clone, Debug, PartialEq)]
pub struct Scaled {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// True when the raw standard deviation fell below [`STD_GUARD`].
    pub guarded: bool,
}

/// Standardizes `values` with the mean and population standard deviation of
/// the positions where `mask` is set. Padding positions come out as 0.
pub fn standard_scale(values: &[f64], mask: &[bool]) -> Result<Scaled> {
    if values.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: values.len(),
            actual: mask.len(),
        });
    }
    let (mean, std, guarded) = masked_stats(values, mask)?;
    let scaled = values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - mean) / std } else { 0.0 })
        .collect();
    Ok(Scaled {
        values: scaled,
        mean,
        std,
        guarded,
    })
}

fn masked_stats(values: &[f64], mask: &[bool]) -> Result<(f64, f64, bool)> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyContext);
    }
    let valid = || values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v);
    let mean = valid().sum::<f64>() / n as f64;
    let var = valid().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < STD_GUARD {
        Ok((mean, STD_GUARD, true))
    } else {
        Ok((mean, std, false))
    }
}

/// Maps standardized values back to the original scale.
pub fn inverse_scale(scaled: &[f64], mean: f64, std: f64) -> Vec<f64> {
    debug_assert!(std > 0.0);
    scaled.iter().map(|&v| v * std + mean).collect()
}

/// Left-pads `values` with zeros up to `target_len`, returning the padded
/// values and the validity mask.
pub fn pad_left(values: &[f64], target_len: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    if values.len() > target_len {
        return Err(Error::TooLong {
            len: values.len(),
            target: target_len,
        });
    }
    let pad = target_len - values.len();
    let mut out = vec![0.0; pad];
    out.extend_from_slice(values);
    let mut mask = vec![false; pad];
    mask.resize(target_len, true);
    Ok((out, mask))
}

/// A context/future pair standardized with the context's statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledWindow {
    pub context: Vec<f64>,
    pub mask: Vec<bool>,
    pub future: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub guarded: bool,
}

/// Builds the window whose future starts at index `split` of `series`.
/// The context is the (at most) `context_len` points before `split`.
pub fn window_at(series: &TimeSeries, split: usize, context_len: usize, horizon: usize) -> Result<ScaledWindow> {
    let values = series.values();
    if split == 0 || split + horizon > values.len() {
        return Err(Error::InvalidInput(format!(
            "split {split} with horizon {horizon} does not fit series '{}' of length {}",
            series.id,
            values.len()
        )));
    }
    let start = split.saturating_sub(context_len);
    let (padded, mask) = pad_left(&values[start..split], context_len)?;
    let scaled = standard_scale(&padded, &mask)?;
    let future = values[split..split + horizon]
        .iter()
        .map(|&v| (v - scaled.mean) / scaled.std)
        .collect();
    Ok(ScaledWindow {
        context: scaled.values,
        mask,
        future,
        mean: scaled.mean,
        std: scaled.std,
        guarded: scaled.guarded,
    })
}

/// Samples a training window with a uniformly drawn split point, keeping at
/// least one real context point.
pub fn sample_window<R: Rng + ?Sized>(
    series: &TimeSeries,
    context_len: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<ScaledWindow> {
    let min = horizon + 1;
    if series.len() < min {
        return Err(Error::TooShort {
            id: series.id.clone(),
            len: series.len(),
            min,
        });
    }
    let split = rng.random_range(1..=series.len() - horizon);
    window_at(series, split, context_len, horizon)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    #[serde(default)]
    freq: String,
    target: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps: Option<Vec<String>>,
}

fn record_to_series(rec: JsonRecord) -> Result<TimeSeries> {
    let mut values = Vec::with_capacity(rec.target.len());
    for (index, v) in rec.target.into_iter().enumerate() {
        match v {
            Some(v) => values.push(v),
            None => return Err(Error::NonFiniteInput { id: rec.id, index }),
        }
    }
    let ts = TimeSeries::new(rec.id, rec.freq, values)?;
    match rec.timestamps {
        Some(t) => ts.with_timestamps(t),
        None => Ok(ts),
    }
}

/// Parses JSON-lines series records: `{"id": str, "freq": str, "target": [numbers]}`.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<TimeSeries>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("<line {}>", lineno + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)?;
        out.push(record_to_series(rec)?);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<TimeSeries>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

pub fn write_jsonl(path: impl AsRef<Path>, series: &[TimeSeries]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in series {
        serde_json::to_writer(&mut w, &series_record(s))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn series_record(s: &TimeSeries) -> JsonRecord {
    JsonRecord {
        id: s.id.clone(),
        freq: s.freq.clone(),
        target: s.values.iter().map(|&v| Some(v)).collect(),
        timestamps: s.timestamps.clone(),
    }
}

/// Parses long-format CSV with header `series_id,timestamp,value`. Series
/// appear in order of first occurrence; rows within a series keep file order.
pub fn parse_csv_long(reader: impl std::io::Read, freq: &str) -> Result<Vec<TimeSeries>> {
    #[derive(Deserialize)]
    struct Row {
        series_id: String,
        timestamp: String,
        value: Option<f64>,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, (Vec<f64>, Vec<String>)> = Default::default();
    for row in rdr.deserialize() {
        let row: Row = row?;
        let entry = groups.entry(row.series_id.clone()).or_insert_with(|| {
            order.push(row.series_id.clone());
            (Vec::new(), Vec::new())
        });
        match row.value {
            Some(v) if v.is_finite() => entry.0.push(v),
            _ => {
                return Err(Error::NonFiniteInput {
                    id: row.series_id,
                    index: entry.0.len(),
                })
            }
        }
        entry.1.push(row.timestamp);
    }
    order
        .into_iter()
        .map(|id| {
            let (values, stamps) = groups.remove(&id).expect("grouped id");
            TimeSeries::new(id, freq, values)?.with_timestamps(stamps)
        })
        .collect()
}

pub fn read_csv_long(path: impl AsRef<Path>, freq: &str) -> Result<Vec<TimeSeries>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv_long(BufReader::new(file), freq)
}

/// Reads a dataset file, choosing the parser by extension (`.csv` or JSON lines).
pub fn read_series_file(path: impl AsRef<Path>, default_freq: &str) -> Result<Vec<TimeSeries>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv_long(path, default_freq),
        _ => read_jsonl(path),
    }
}
