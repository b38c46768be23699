//! Zero-shot evaluation: seasonal-naive baseline, point metrics, relative
//! scores with geometric-mean aggregation, and the last-window and rolling
//! protocols.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{forecast, ForecastRequest};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::series::{standard_scale, TimeSeries};

/// Below this the MASE denominator counts as degenerate.
pub const MASE_SCALE_GUARD: f64 = 1e-9;

/// Anything that maps a context to a point trajectory of length `horizon`.
pub trait Forecaster: Sync {
    fn name(&self) -> String;
    fn forecast(&self, context: &[f64], horizon: usize) -> Result<Vec<f64>>;

    /// Forecast for a series of `dataset`. The evaluation protocols call this,
    /// so forecasters that depend on dataset metadata can override it.
    fn forecast_for(&self, dataset: &DatasetSpec, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        let _ = dataset;
        self.forecast(context, horizon)
    }
}

/// Repeats the last observed seasonal cycle.
#[derive(Clone, Copy, Debug)]
pub struct SeasonalNaive {
    pub period: usize,
}

impl Forecaster for SeasonalNaive {
    fn name(&self) -> String {
        "seasonal_naive".into()
    }

    fn forecast(&self, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        Ok(seasonal_naive(context, self.period, horizon).0)
    }
}

/// Seasonal naive using each dataset's own period; outside a dataset it
/// falls back to period 1 (repeat the last value).
#[derive(Clone, Copy, Debug, Default)]
pub struct DatasetNaive;

impl Forecaster for DatasetNaive {
    fn name(&self) -> String {
        "seasonal_naive".into()
    }

    fn forecast(&self, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        SeasonalNaive { period: 1 }.forecast(context, horizon)
    }

    fn forecast_for(&self, dataset: &DatasetSpec, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        SeasonalNaive { period: dataset.period }.forecast(context, horizon)
    }
}

/// Wraps a model so it can be scored like any other forecaster.
pub struct ModelForecaster<'a, T: Scalar> {
    pub model: &'a Model<T>,
}

impl<T: Scalar> Forecaster for ModelForecaster<'_, T> {
    fn name(&self) -> String {
        "model".into()
    }

    fn forecast(&self, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        let r = forecast(
            self.model,
            &ForecastRequest {
                context: context.to_vec(),
                horizon,
                quantiles: Some(Vec::new()),
            },
        )?;
        Ok(r.point)
    }
}

/// Seasonal period by frequency token.
pub fn seasonal_period(freq: &str) -> Option<usize> {
    Some(match freq {
        "15min" | "15T" => 96,
        "30min" | "30T" => 48,
        "H" | "h" => 24,
        "D" => 7,
        "B" => 5,
        "W" => 1,
        "M" | "MS" => 12,
        "Q" | "QS" => 4,
        "Y" | "A" | "YS" | "AS" => 1,
        _ => return None,
    })
}

/// Returns the forecast and whether it fell back to `m = 1` because the
/// context is shorter than one season.
pub fn seasonal_naive(context: &[f64], m: usize, horizon: usize) -> (Vec<f64>, bool) {
    let len = context.len();
    let (m, fallback) = if m == 0 || len < m { (1, true) } else { (m, false) };
    let out = (0..horizon).map(|t| context[len - m + t % m]).collect();
    (out, fallback)
}

pub fn mae(truth: &[f64], forecast: &[f64]) -> f64 {
    assert_eq!(truth.len(), forecast.len(), "mae: lengths");
    truth.iter().zip(forecast).map(|(y, f)| (y - f).abs()).sum::<f64>() / truth.len() as f64
}

/// `2|y - f| / (|y| + |f|)` averaged over steps; both-zero steps count 0.
pub fn smape(truth: &[f64], forecast: &[f64]) -> f64 {
    assert_eq!(truth.len(), forecast.len(), "smape: lengths");
    let s: f64 = truth
        .iter()
        .zip(forecast)
        .map(|(&y, &f)| {
            let den = y.abs() + f.abs();
            if den == 0.0 {
                0.0
            } else {
                2.0 * (y - f).abs() / den
            }
        })
        .sum();
    s / truth.len() as f64
}

/// MAE scaled by the mean absolute seasonal difference of the context.
/// `None` when the context is too short or the scale is degenerate.
pub fn mase(truth: &[f64], forecast: &[f64], context: &[f64], m: usize) -> Option<f64> {
    if m == 0 || context.len() <= m {
        return None;
    }
    let diffs = context.len() - m;
    let scale = (m..context.len()).map(|t| (context[t] - context[t - m]).abs()).sum::<f64>() / diffs as f64;
    if scale < MASE_SCALE_GUARD {
        return None;
    }
    Some(mae(truth, forecast) / scale)
}

/// Geometric mean of per-dataset ratios, with the datasets left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoMean {
    pub value: Option<f64>,
    pub ratios: BTreeMap<String, f64>,
    pub excluded: Vec<String>,
}

/// `exp(mean(ln(model / baseline)))` over datasets with a finite positive
/// ratio. Datasets absent from either side, or with a missing or zero
/// metric, are excluded and listed.
pub fn relative_geomean(model: &BTreeMap<String, Option<f64>>, baseline: &BTreeMap<String, Option<f64>>) -> GeoMean {
    let mut ratios = BTreeMap::new();
    let mut excluded = Vec::new();
    let names: std::collections::BTreeSet<&String> = model.keys().chain(baseline.keys()).collect();
    for name in names {
        let r = match (model.get(name).copied().flatten(), baseline.get(name).copied().flatten()) {
            (Some(a), Some(b)) => a / b,
            _ => f64::NAN,
        };
        if r.is_finite() && r > 0.0 {
            ratios.insert(name.clone(), r);
        } else {
            excluded.push(name.clone());
        }
    }
    let value = if ratios.is_empty() {
        None
    } else {
        Some((ratios.values().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp())
    };
    GeoMean { value, ratios, excluded }
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub name: String,
    pub freq: String,
    pub period: usize,
    pub horizon: usize,
    pub series: Vec<TimeSeries>,
}

impl DatasetSpec {
    /// Uses `period` when given, otherwise the frequency map, otherwise 1.
    pub fn new(name: impl Into<String>, freq: impl Into<String>, horizon: usize, period: Option<usize>, series: Vec<TimeSeries>) -> Result<Self> {
        let freq = freq.into();
        let period = period.or_else(|| seasonal_period(&freq)).unwrap_or(1);
        if horizon == 0 || period == 0 {
            return Err(Error::Config("dataset horizon and seasonal period must be positive".into()));
        }
        Ok(DatasetSpec {
            name: name.into(),
            freq,
            period,
            horizon,
            series,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mase: Option<f64>,
    pub smape: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LastWindowRow {
    pub dataset: String,
    pub horizon: usize,
    pub period: usize,
    pub series_evaluated: usize,
    pub series_skipped: usize,
    /// Series whose MASE scale was degenerate and were left out of the MASE mean.
    pub mase_degenerate: usize,
    /// Series where seasonal naive fell back to the last value.
    pub naive_fallback: usize,
    pub model: Metrics,
    pub baseline: Metrics,
    pub relative: Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    LastWindow,
    Rolling,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_window" | "last-window" => Ok(Protocol::LastWindow),
            "rolling" => Ok(Protocol::Rolling),
            _ => Err(Error::Config(format!("unknown protocol '{s}' (use last_window or rolling)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LastWindowReport {
    pub protocol: Protocol,
    pub model: String,
    pub rows: Vec<LastWindowRow>,
    pub aggregate_mase: GeoMean,
    pub aggregate_smape: GeoMean,
    pub aggregate_mae: GeoMean,
    /// Datasets with no evaluable series.
    pub excluded: Vec<String>,
}

fn mean_some(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs.flatten() {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

struct SeriesScore {
    model: Metrics,
    baseline: Metrics,
    fallback: bool,
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    }
}

/// Scores every dataset on the final `horizon` points of each series and
/// compares against seasonal naive.
pub fn last_window_eval(datasets: &[DatasetSpec], forecaster: &dyn Forecaster) -> Result<LastWindowReport> {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for ds in datasets {
        let h = ds.horizon;
        let usable: Vec<&TimeSeries> = ds.series.iter().filter(|s| s.len() > h).collect();
        let skipped = ds.series.len() - usable.len();
        let scores: Vec<SeriesScore> = usable
            .par_iter()
            .map(|s| {
                let v = s.values();
                let (context, truth) = v.split_at(v.len() - h);
                let (naive, fallback) = seasonal_naive(context, ds.period, h);
                let pred = forecaster.forecast_for(ds, context, h)?;
                Ok(SeriesScore {
                    model: Metrics {
                        mase: mase(truth, &pred, context, ds.period),
                        smape: Some(smape(truth, &pred)),
                        mae: Some(mae(truth, &pred)),
                    },
                    baseline: Metrics {
                        mase: mase(truth, &naive, context, ds.period),
                        smape: Some(smape(truth, &naive)),
                        mae: Some(mae(truth, &naive)),
                    },
                    fallback,
                })
            })
            .collect::<Result<_>>()?;
        if scores.is_empty() {
            excluded.push(ds.name.clone());
        }
        let agg = |f: fn(&SeriesScore) -> Metrics| Metrics {
            mase: mean_some(scores.iter().map(|s| f(s).mase)),
            smape: mean_some(scores.iter().map(|s| f(s).smape)),
            mae: mean_some(scores.iter().map(|s| f(s).mae)),
        };
        let model = agg(|s| s.model);
        let baseline = agg(|s| s.baseline);
        rows.push(LastWindowRow {
            dataset: ds.name.clone(),
            horizon: h,
            period: ds.period,
            series_evaluated: scores.len(),
            series_skipped: skipped,
            mase_degenerate: scores.iter().filter(|s| s.model.mase.is_none()).count(),
            naive_fallback: scores.iter().filter(|s| s.fallback).count(),
            relative: Metrics {
                mase: ratio(model.mase, baseline.mase),
                smape: ratio(model.smape, baseline.smape),
                mae: ratio(model.mae, baseline.mae),
            },
            model,
            baseline,
        });
    }
    let pick = |f: fn(&Metrics) -> Option<f64>, base: bool| -> BTreeMap<String, Option<f64>> {
        rows.iter()
            .map(|r| (r.dataset.clone(), f(if base { &r.baseline } else { &r.model })))
            .collect()
    };
    Ok(LastWindowReport {
        protocol: Protocol::LastWindow,
        model: forecaster.name(),
        aggregate_mase: relative_geomean(&pick(|m| m.mase, false), &pick(|m| m.mase, true)),
        aggregate_smape: relative_geomean(&pick(|m| m.smape, false), &pick(|m| m.smape, true)),
        aggregate_mae: relative_geomean(&pick(|m| m.mae, false), &pick(|m| m.mae, true)),
        rows,
        excluded,
    })
}

/// Start offsets (within the region) of every rolling window.
pub fn rolling_window_starts(region_len: usize, context_len: usize, horizon: usize, stride: usize) -> Vec<usize> {
    assert!(stride > 0, "stride must be positive");
    if region_len < context_len + horizon {
        return Vec::new();
    }
    let count = (region_len - context_len - horizon) / stride + 1;
    (0..count).map(|i| i * stride).collect()
}

/// First index of the test split: the canonical border for ETT-style
/// datasets, otherwise the start of the final 20%.
pub fn test_split_start(dataset: &str, len: usize) -> usize {
    let month_hours = 30 * 24;
    let border = if dataset.starts_with("ETTh") {
        Some(12 * month_hours + 4 * month_hours)
    } else if dataset.starts_with("ETTm") {
        Some((12 * month_hours + 4 * month_hours) * 4)
    } else {
        None
    };
    match border {
        Some(b) if b < len => b,
        _ => len - len / 5,
    }
}

/// End (exclusive) of the test split.
pub fn test_split_end(dataset: &str, len: usize) -> usize {
    let month_hours = 30 * 24;
    let end = if dataset.starts_with("ETTh") {
        Some(20 * month_hours)
    } else if dataset.starts_with("ETTm") {
        Some(20 * month_hours * 4)
    } else {
        None
    };
    end.map_or(len, |e| e.min(len))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingRow {
    pub dataset: String,
    /// `None` marks the per-dataset average row.
    pub horizon: Option<usize>,
    pub windows: usize,
    pub mae: Option<f64>,
    pub smape: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingReport {
    pub protocol: Protocol,
    pub model: String,
    pub context_len: usize,
    pub rows: Vec<RollingRow>,
    pub excluded: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RollingOptions {
    pub context_len: usize,
    pub horizons: Vec<usize>,
    /// `None` uses the horizon (non-overlapping windows).
    pub stride: Option<usize>,
}

impl Default for RollingOptions {
    fn default() -> Self {
        RollingOptions {
            context_len: 512,
            horizons: vec![96, 192, 336, 720],
            stride: None,
        }
    }
}

/// Slides (context, horizon) windows over each series' test region (the
/// test split extended back by one context) and averages MAE and sMAPE on
/// data standardized with pre-test statistics.
pub fn rolling_eval(datasets: &[DatasetSpec], forecaster: &dyn Forecaster, opts: &RollingOptions) -> Result<RollingReport> {
    let c = opts.context_len;
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for ds in datasets {
        let regions: Vec<Vec<f64>> = ds
            .series
            .iter()
            .map(|s| {
                let v = s.values();
                let start = test_split_start(&ds.name, v.len());
                let end = test_split_end(&ds.name, v.len());
                let history = &v[..start.max(1)];
                let stats = standard_scale(history, &vec![true; history.len()])?;
                Ok(v[start.saturating_sub(c)..end]
                    .iter()
                    .map(|x| (x - stats.mean) / stats.std)
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut ds_rows = Vec::new();
        for &h in &opts.horizons {
            let stride = opts.stride.unwrap_or(h);
            let jobs: Vec<(usize, usize)> = regions
                .iter()
                .enumerate()
                .flat_map(|(i, r)| rolling_window_starts(r.len(), c, h, stride).into_iter().map(move |s| (i, s)))
                .collect();
            let scores: Vec<(f64, f64)> = jobs
                .par_iter()
                .map(|&(i, s)| {
                    let r = &regions[i];
                    let truth = &r[s + c..s + c + h];
                    let pred = forecaster.forecast_for(ds, &r[s..s + c], h)?;
                    Ok((mae(truth, &pred), smape(truth, &pred)))
                })
                .collect::<Result<_>>()?;
            if scores.is_empty() {
                continue;
            }
            let n = scores.len() as f64;
            ds_rows.push(RollingRow {
                dataset: ds.name.clone(),
                horizon: Some(h),
                windows: scores.len(),
                mae: Some(scores.iter().map(|s| s.0).sum::<f64>() / n),
                smape: Some(scores.iter().map(|s| s.1).sum::<f64>() / n),
            });
        }
        if ds_rows.is_empty() {
            excluded.push(ds.name.clone());
            continue;
        }
        let avg = RollingRow {
            dataset: ds.name.clone(),
            horizon: None,
            windows: ds_rows.iter().map(|r| r.windows).sum(),
            mae: mean_some(ds_rows.iter().map(|r| r.mae)),
            smape: mean_some(ds_rows.iter().map(|r| r.smape)),
        };
        rows.extend(ds_rows);
        rows.push(avg);
    }
    Ok(RollingReport {
        protocol: Protocol::Rolling,
        model: forecaster.name(),
        context_len: c,
        rows,
        excluded,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v}"))
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

impl LastWindowReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_file(path, |b| Ok(serde_json::to_writer_pretty(b, self)?))
    }

    /// One row per dataset plus a final geometric-mean row of relative scores.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record([
                "dataset", "horizon", "series", "mase", "smape", "mae", "naive_mase", "naive_smape", "naive_mae",
                "rel_mase", "rel_smape", "rel_mae",
            ])?;
            for r in &self.rows {
                w.write_record([
                    r.dataset.clone(),
                    r.horizon.to_string(),
                    r.series_evaluated.to_string(),
                    fmt_opt(r.model.mase),
                    fmt_opt(r.model.smape),
                    fmt_opt(r.model.mae),
                    fmt_opt(r.baseline.mase),
                    fmt_opt(r.baseline.smape),
                    fmt_opt(r.baseline.mae),
                    fmt_opt(r.relative.mase),
                    fmt_opt(r.relative.smape),
                    fmt_opt(r.relative.mae),
                ])?;
            }
            let blank = String::new();
            w.write_record([
                "geomean".to_string(),
                blank.clone(),
                blank.clone(),
                blank.clone(),
                blank.clone(),
                blank.clone(),
                blank.clone(),
                blank.clone(),
                blank,
                fmt_opt(self.aggregate_mase.value),
                fmt_opt(self.aggregate_smape.value),
                fmt_opt(self.aggregate_mae.value),
            ])?;
            w.flush().map_err(|e| Error::io("<csv>", e))?;
            Ok(())
        })
    }
}

impl RollingReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_file(path, |b| Ok(serde_json::to_writer_pretty(b, self)?))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["dataset", "horizon", "windows", "mae", "smape"])?;
            for r in &self.rows {
                w.write_record([
                    r.dataset.clone(),
                    r.horizon.map_or_else(|| "avg".to_string(), |h| h.to_string()),
                    r.windows.to_string(),
                    fmt_opt(r.mae),
                    fmt_opt(r.smape),
                ])?;
            }
            w.flush().map_err(|e| Error::io("<csv>", e))?;
            Ok(())
        })
    }
}

/// Either kind of report, for callers that pick the protocol at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalReport {
    LastWindow(LastWindowReport),
    Rolling(RollingReport),
}

impl EvalReport {
    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        match self {
            EvalReport::LastWindow(r) => {
                r.write_json(json)?;
                r.write_csv(csv)
            }
            EvalReport::Rolling(r) => {
                r.write_json(json)?;
                r.write_csv(csv)
            }
        }
    }

    /// Number of datasets that produced at least one score.
    pub fn evaluated(&self) -> usize {
        match self {
            EvalReport::LastWindow(r) => r.rows.len() - r.excluded.len(),
            EvalReport::Rolling(r) => r.rows.iter().filter(|x| x.horizon.is_none()).count(),
        }
    }
}

/// Writes a compact text summary, handy for logs.
pub fn summarize(report: &EvalReport, mut out: impl Write) -> std::io::Result<()> {
    match report {
        EvalReport::LastWindow(r) => {
            for row in &r.rows {
                writeln!(
                    out,
                    "{:<24} series={:<5} rel_mase={} rel_smape={}",
                    row.dataset,
                    row.series_evaluated,
                    fmt_opt(row.relative.mase),
                    fmt_opt(row.relative.smape)
                )?;
            }
            writeln!(
                out,
                "geomean rel_mase={} rel_smape={}",
                fmt_opt(r.aggregate_mase.value),
                fmt_opt(r.aggregate_smape.value)
            )
        }
        EvalReport::Rolling(r) => {
            for row in &r.rows {
                let h = row.horizon.map_or_else(|| "avg".to_string(), |h| h.to_string());
                writeln!(out, "{:<24} h={:<5} mae={} smape={}", row.dataset, h, fmt_opt(row.mae), fmt_opt(row.smape))?;
            }
            Ok(())
        }
    }
}
