//! Autoregressive patch-by-patch forecasting.

use crate::error::{Error, Result};
use crate::head::QuantileSet;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::series::{pad_left, standard_scale};

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRequest {
    pub context: Vec<f64>,
    pub horizon: usize,
    /// Levels to report; `None` reports every trained level.
    pub quantiles: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastResult {
    pub point: Vec<f64>,
    pub levels: Vec<f64>,
    /// `H` rows, one value per entry of `levels`.
    pub quantiles: Vec<Vec<f64>>,
    pub steps_used: usize,
}

impl ForecastResult {
    /// Trajectory of one level across the horizon.
    pub fn quantile_path(&self, c: usize) -> Vec<f64> {
        self.quantiles.iter().map(|row| row[c]).collect()
    }
}

/// Number of decoder passes needed for `horizon` points.
pub fn steps_used(horizon: usize, output_patch: usize) -> usize {
    horizon.div_ceil(output_patch)
}

fn resolve_levels(available: &QuantileSet, requested: &Option<Vec<f64>>) -> Result<Vec<usize>> {
    match requested {
        None => Ok((0..available.len()).collect()),
        Some(req) => req
            .iter()
            .map(|&q| {
                available.position(q).ok_or_else(|| Error::UnknownQuantile {
                    requested: q,
                    available: available.levels().to_vec(),
                })
            })
            .collect(),
    }
}

/// Truncates or left-pads the context, scales it with its own statistics,
/// encodes once, then generates `ceil(H / P_o)` patches feeding back only
/// the point forecasts. Outputs are cut to `H` and mapped back to the
/// original scale.
pub fn forecast<T: Scalar>(model: &Model<T>, req: &ForecastRequest) -> Result<ForecastResult> {
    if req.horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    if req.context.is_empty() {
        return Err(Error::EmptyContext);
    }
    if let Some(index) = req.context.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput {
            id: "<request>".into(),
            index,
        });
    }
    let cfg = model.config();
    let cols = resolve_levels(&cfg.quantiles, &req.quantiles)?;
    let c = cfg.context_len;
    let recent = &req.context[req.context.len().saturating_sub(c)..];
    let (padded, mask) = pad_left(recent, c)?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyContext);
    }
    let scaled = standard_scale(&padded, &mask)?;
    let ctx: Vec<T> = scaled.values.iter().map(|&v| T::from_f64(v)).collect();
    let memory = model.encode(&ctx, &mask);

    let steps = steps_used(req.horizon, cfg.output_patch);
    let mut prefix: Vec<T> = Vec::with_capacity(steps * cfg.output_patch);
    let mut point = Vec::with_capacity(steps * cfg.output_patch);
    let mut quantiles = Vec::with_capacity(steps * cfg.output_patch);
    for step in 0..steps {
        let preds = model.predict_all(&memory, &prefix);
        let last = preds.last().expect("at least the start token");
        let finite = last.point.iter().chain(last.quantiles.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteForecast { step });
        }
        prefix.extend_from_slice(&last.point);
        for (p, qs) in last.point.iter().zip(&last.quantiles) {
            point.push(p.as_f64() * scaled.std + scaled.mean);
            quantiles.push(cols.iter().map(|&i| qs[i].as_f64() * scaled.std + scaled.mean).collect::<Vec<f64>>());
        }
    }
    point.truncate(req.horizon);
    quantiles.truncate(req.horizon);
    Ok(ForecastResult {
        point,
        levels: cols.iter().map(|&i| cfg.quantiles.levels()[i]).collect(),
        quantiles,
        steps_used: steps,
    })
}
