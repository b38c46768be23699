//! Shared fixtures and checks for the integration tests and the acceptance
//! runner. Every oracle here is written independently of the library code
//! it is compared against.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsfound_core::eval::{
    last_window_eval, mae, mase, relative_geomean, rolling_eval, rolling_window_starts, smape, RollingOptions,
};
use tsfound_core::model::Memory;
use tsfound_core::series::{pad_left, standard_scale};
use tsfound_core::tape::Tape;
use tsfound_core::training::{loss_and_grads, make_batch, mse_loss, quantile_loss, AdamW, Batch};
use tsfound_core::{
    checkpoint, forecast, DatasetNaive, DatasetSpec, ForecastRequest, Model, ModelConfig, QuantileSet, TimeSeries,
    TrainConfig, Trainer,
};

/// Outcome of one check: pass flag plus a one-line measurement.
#[derive(Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    pub fn assert(self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        patch_sizes: vec![2, 4],
        output_patch: 4,
        context_len: 16,
        d_model: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_ff: 32,
        buckets: 8,
        max_distance: 16,
        dropout: 0.0,
        quantiles: QuantileSet::new(vec![0.1, 0.5, 0.9]).unwrap(),
    }
}

pub fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        lr: 1e-3,
        horizon: 8,
        warmup_steps: 0,
        ..TrainConfig::default()
    }
}

/// Smooth series with a few periods and offsets.
pub fn wave_corpus(n: usize, len: usize, seed: u64) -> Vec<TimeSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let period = rng.random_range(4.0..24.0);
            let amp = rng.random_range(0.5..3.0);
            let level = rng.random_range(-2.0..2.0);
            let slope = rng.random_range(-0.02..0.02);
            let values = (0..len)
                .map(|t| {
                    let t = t as f64;
                    level + slope * t + amp * (std::f64::consts::TAU * t / period).sin() + 0.05 * rng.random::<f64>()
                })
                .collect();
            TimeSeries::new(format!("w{i}"), "H", values).unwrap()
        })
        .collect()
}

// ---------------------------------------------------------------- oracles

pub fn oracle_pinball(x: f64, xq: f64, q: f64) -> f64 {
    let u = x - xq;
    if u >= 0.0 {
        q * u
    } else {
        (q - 1.0) * u
    }
}

pub fn oracle_mse(targets: &[f64], point: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..targets.len() {
        acc += (targets[i] - point[i]).powi(2);
    }
    acc / targets.len() as f64
}

pub fn oracle_ql(targets: &[f64], quantiles: &[Vec<f64>], levels: &[f64]) -> f64 {
    let mut acc = 0.0;
    for c in 0..levels.len() {
        for i in 0..targets.len() {
            acc += oracle_pinball(targets[i], quantiles[i][c], levels[c]);
        }
    }
    acc / targets.len() as f64
}

pub fn oracle_smape(y: &[f64], f: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.len() {
        let den = y[i].abs() + f[i].abs();
        if den > 0.0 {
            acc += 2.0 * (y[i] - f[i]).abs() / den;
        }
    }
    acc / y.len() as f64
}

pub fn oracle_mae(y: &[f64], f: &[f64]) -> f64 {
    y.iter().zip(f).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

pub fn oracle_mase(y: &[f64], f: &[f64], ctx: &[f64], m: usize) -> f64 {
    let mut scale = 0.0;
    let mut n = 0;
    for t in m..ctx.len() {
        scale += (ctx[t] - ctx[t - m]).abs();
        n += 1;
    }
    oracle_mae(y, f) / (scale / n as f64)
}

/// Product form of the geometric mean, as opposed to the log-mean form.
pub fn oracle_geomean(ratios: &[f64]) -> f64 {
    ratios.iter().product::<f64>().powf(1.0 / ratios.len() as f64)
}

/// Library losses and metrics against the oracles on `n` random instances.
pub fn oracle_agreement(n: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, a: f64, b: f64| {
        let e = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..n {
        let h = rng.random_range(1..64);
        let q = rng.random_range(1..10);
        let y: Vec<f64> = (0..h).map(|_| rng.random_range(-10.0..10.0)).collect();
        let f: Vec<f64> = (0..h).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut levels: Vec<f64> = (0..q).map(|_| rng.random_range(0.01..0.99)).collect();
        levels.sort_by(f64::total_cmp);
        let qs: Vec<Vec<f64>> = (0..h).map(|_| (0..q).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        note("mse_loss", mse_loss(&y, &f), oracle_mse(&y, &f));
        note("quantile_loss", quantile_loss(&y, &qs, &levels), oracle_ql(&y, &qs, &levels));
        note("smape", smape(&y, &f), oracle_smape(&y, &f));
        note("mae", mae(&y, &f), oracle_mae(&y, &f));

        let m = rng.random_range(1..13);
        let ctx_len = m + rng.random_range(1..100);
        let ctx: Vec<f64> = (0..ctx_len).map(|_| rng.random_range(-10.0..10.0)).collect();
        note("mase", mase(&y, &f, &ctx, m).expect("random context has a scale"), oracle_mase(&y, &f, &ctx, m));

        let k = rng.random_range(1..12);
        let names: Vec<String> = (0..k).map(|i| format!("d{i}")).collect();
        let model: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..5.0)).collect();
        let base: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..5.0)).collect();
        let to_map = |v: &[f64]| names.iter().cloned().zip(v.iter().map(|&x| Some(x))).collect::<BTreeMap<_, _>>();
        let g = relative_geomean(&to_map(&model), &to_map(&base)).value.unwrap();
        let ratios: Vec<f64> = model.iter().zip(&base).map(|(a, b)| a / b).collect();
        note("relative_geomean", g, oracle_geomean(&ratios));
    }
    let pass = worst.values().all(|&e| e <= 1e-12);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::new(pass, format!("{n} instances, worst relative gap: {detail}"))
}

// ------------------------------------------------------ gradient checking

/// Head outputs of a teacher-forced forward pass, `B*T x width`.
fn predictions(model: &Model<f64>, batch: &Batch) -> Vec<f64> {
    let ctx: Vec<&[f64]> = batch.samples.iter().map(|s| s.context.as_slice()).collect();
    let masks: Vec<&[bool]> = batch.samples.iter().map(|s| s.mask.as_slice()).collect();
    let pre: Vec<&[f64]> = batch.samples.iter().map(|s| s.prefix.as_slice()).collect();
    let mut tape = Tape::new();
    let v = model.forward_batch(&mut tape, &ctx, &masks, &pre, &mut None);
    tape.value(v).to_vec()
}

/// Total loss recomputed from raw head outputs, plus the residual sign
/// pattern that locates the pinball kinks.
fn oracle_total(model: &Model<f64>, batch: &Batch) -> (f64, Vec<bool>) {
    let cfg = model.config();
    let levels = cfg.quantiles.levels();
    let width = levels.len() + 1;
    let pred = predictions(model, batch);
    let targets: Vec<f64> = batch.samples.iter().flat_map(|s| s.targets.iter().flatten().copied()).collect();
    let mut se = 0.0;
    let mut ql = 0.0;
    let mut signs = Vec::with_capacity(targets.len() * levels.len());
    for (i, &x) in targets.iter().enumerate() {
        let cell = &pred[i * width..(i + 1) * width];
        se += (x - cell[0]).powi(2);
        for (c, &q) in levels.iter().enumerate() {
            ql += oracle_pinball(x, cell[1 + c], q);
            signs.push(x >= cell[1 + c]);
        }
    }
    let n = targets.len() as f64;
    (se / n + ql / n, signs)
}

#[derive(Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    /// Entries whose stencil straddled a pinball kink and needed a smaller step.
    pub refined: usize,
    pub loss_gap: f64,
}

/// Denominator floor for the relative error. The stencil's round-off noise
/// is about `eps * |L| / h`, near 1e-12 here, so gradients smaller than the
/// floor (including exact zeros) are compared at a 1e-11 absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Analytic gradients of the total loss against five-point central
/// differences for every scalar parameter of a 64-bit tiny model.
pub fn gradient_check(seed: u64) -> GradReport {
    let cfg = tiny_config();
    let mut model = Model::<f64>::init(cfg.clone(), seed).unwrap();
    // move weights away from the small init so no gradient is trivially tiny
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in model.store_mut().values_mut() {
        for x in v.iter_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    let corpus = wave_corpus(6, 40, seed);
    let batch = make_batch(&corpus, &cfg, &tiny_train(1), seed, 0).unwrap();
    let (loss, grads) = loss_and_grads(&model, &batch, &mut None);
    let (base_total, base_signs) = oracle_total(&model, &batch);

    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
        refined: 0,
        loss_gap: (loss.total - base_total).abs(),
    };
    let specs = model.store().specs().to_vec();
    for (p, spec) in specs.iter().enumerate() {
        for j in 0..spec.len() {
            let analytic = grads[p].as_ref().map_or(0.0, |g| g[j]);
            let orig = model.store().values()[p][j];
            let mut h = 1e-3;
            let numeric = loop {
                let mut eval = |delta: f64| {
                    model.store_mut().values_mut()[p][j] = orig + delta;
                    let r = oracle_total(&model, &batch);
                    model.store_mut().values_mut()[p][j] = orig;
                    r
                };
                let (f2p, s2p) = eval(2.0 * h);
                let (f1p, s1p) = eval(h);
                let (f1m, s1m) = eval(-h);
                let (f2m, s2m) = eval(-2.0 * h);
                let smooth = [s2p, s1p, s1m, s2m].iter().all(|s| *s == base_signs);
                if smooth || h < 1e-9 {
                    break (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * h);
                }
                report.refined += 1;
                h /= 10.0;
            };
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{}[{j}] analytic {analytic:.6e} numeric {numeric:.6e}", spec.name);
            }
            report.checked += 1;
        }
    }
    report
}

// ------------------------------------------------ structural properties

/// Scaled, padded context of a raw series tail, ready for `Model::encode`.
pub fn prepared<T: tsfound_core::scalar::Scalar>(raw: &[f64], c: usize) -> (Vec<T>, Vec<bool>) {
    let (padded, mask) = pad_left(raw, c).unwrap();
    let scaled = standard_scale(&padded, &mask).unwrap();
    (scaled.values.iter().map(|&v| T::from_f64(v)).collect(), mask)
}

/// Perturbing decoder token `t + 1` leaves outputs `0..=t` bit-identical.
pub fn decoder_causality(model: &Model<f32>, seed: u64) -> Outcome {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..cfg.context_len).map(|t| (t as f64 * 0.3).sin() + rng.random::<f64>()).collect();
    let (ctx, mask) = prepared::<f32>(&raw, cfg.context_len);
    let memory = model.encode(&ctx, &mask);
    let steps = 6;
    let p_o = cfg.output_patch;
    let prefix: Vec<f32> = (0..steps * p_o).map(|_| rng.random_range(-2.0..2.0)).collect();
    let base = model.decode(&memory, &prefix);
    let d = cfg.d_model;
    let mut violations = 0;
    for t in 0..steps {
        let mut changed = prefix.clone();
        for v in &mut changed[t * p_o..(t + 1) * p_o] {
            *v += rng.random_range(0.5..3.0);
        }
        let out = model.decode(&memory, &changed);
        // prefix patch t is decoder token t + 1
        if out[..(t + 1) * d] != base[..(t + 1) * d] {
            violations += 1;
        }
        if out[(t + 1) * d..(t + 2) * d] == base[(t + 1) * d..(t + 2) * d] {
            violations += 1; // the perturbed token itself must react
        }
    }
    Outcome::new(violations == 0, format!("{steps} perturbed tokens, {violations} violations"))
}

/// Garbage in the input embeddings of padded patches leaves encoder outputs
/// at valid positions, and the first forecast patch, within 1e-6.
///
/// The embeddings are perturbed rather than the raw points: a coarse patch
/// that straddles the padding boundary legitimately sees padded values through
/// its projector, and only the patch-level mask is meant to provide invariance.
pub fn padding_invariance(model: &Model<f32>, seed: u64) -> Outcome {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real = cfg.context_len / 2 + 3;
    let raw: Vec<f64> = (0..real).map(|t| (t as f64 * 0.2).cos() * 3.0 + 1.0).collect();
    let (ctx, mask) = prepared::<f32>(&raw, cfg.context_len);
    let (fused, patch_mask) = model.embed_context(&ctx, &mask);
    let d = cfg.d_model;
    let base = Memory {
        values: model.encode_embeddings(&fused, &patch_mask),
        patch_mask: patch_mask.clone(),
    };
    let base_pred = model.predict_all(&base, &[]);
    let padded = patch_mask.iter().filter(|&&m| !m).count();
    let mut worst = 0.0f32;
    let mut worst_pred = 0.0f32;
    for _ in 0..5 {
        let mut noisy = fused.clone();
        for (j, &valid) in patch_mask.iter().enumerate() {
            if !valid {
                for v in &mut noisy[j * d..(j + 1) * d] {
                    *v = rng.random_range(-50.0..50.0);
                }
            }
        }
        let other = Memory {
            values: model.encode_embeddings(&noisy, &patch_mask),
            patch_mask: patch_mask.clone(),
        };
        for (j, &valid) in patch_mask.iter().enumerate() {
            if valid {
                for c in 0..d {
                    worst = worst.max((base.values[j * d + c] - other.values[j * d + c]).abs());
                }
            }
        }
        let pred = model.predict_all(&other, &[]);
        for (a, b) in pred[0].point.iter().zip(&base_pred[0].point) {
            worst_pred = worst_pred.max((a - b).abs());
        }
    }
    let pass = padded > 0 && worst <= 1e-6 && worst_pred <= 1e-6;
    Outcome::new(
        pass,
        format!("{padded} padded patches perturbed; max change at valid positions {worst:.1e}, in forecasts {worst_pred:.1e}"),
    )
}

/// Teacher forcing with the model's own point forecast as the decoder input
/// reproduces the autoregressive patch predictions.
pub fn teacher_forcing_matches_generation(model: &Model<f32>, horizon: usize) -> Outcome {
    let cfg = model.config();
    let raw: Vec<f64> = (0..cfg.context_len).map(|t| (t as f64 * 0.25).sin() * 2.0 + t as f64 * 0.01).collect();
    let (ctx, mask) = prepared::<f32>(&raw, cfg.context_len);
    let memory: Memory<f32> = model.encode(&ctx, &mask);
    let steps = horizon.div_ceil(cfg.output_patch);
    let mut prefix: Vec<f32> = Vec::new();
    let mut generated = Vec::new();
    for _ in 0..steps {
        let last = model.predict_all(&memory, &prefix).pop().unwrap();
        prefix.extend_from_slice(&last.point);
        generated.push(last);
    }
    // one batched teacher-forced pass over the same inputs, as in training
    let tf_prefix = &prefix[..(steps - 1) * cfg.output_patch];
    let mut tape = Tape::new();
    let v = model.forward_batch(&mut tape, &[&ctx], &[&mask], &[tf_prefix], &mut None);
    let width = cfg.head_width();
    let mut worst = 0.0f32;
    for (t, row) in tape.value(v).chunks(width).enumerate() {
        let flat = generated[t].to_flat();
        for (a, b) in row.iter().zip(&flat) {
            worst = worst.max((a - b).abs());
        }
    }
    Outcome::new(worst <= 1e-5, format!("{steps} steps, max |tf - ar| {worst:.2e}"))
}

// ------------------------------------------------------------- training

/// Two trainers from the same seed produce bit-identical parameters.
pub fn same_seed_runs_identical(model_cfg: &ModelConfig, train: &TrainConfig, corpus: &[TimeSeries], steps: usize) -> Outcome {
    let run = || {
        let mut t = Trainer::new(Model::init(model_cfg.clone(), 11).unwrap(), train.clone(), 11, corpus.to_vec()).unwrap();
        let logs: Vec<_> = (0..steps).map(|_| t.step_once().unwrap()).collect();
        (t.model.store().clone(), logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    let moved = a != Model::<f32>::init(model_cfg.clone(), 11).unwrap().store().clone();
    Outcome::new(a == b && la == lb && moved, format!("{steps} steps, identical={} moved={moved}", a == b && la == lb))
}

/// Stop at `split`, round-trip through a checkpoint file, resume and compare
/// with an uninterrupted run.
pub fn resume_matches_uninterrupted(
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    corpus: &[TimeSeries],
    split: usize,
    dir: &std::path::Path,
) -> Outcome {
    let seed = 5;
    let fresh = || Trainer::new(Model::init(model_cfg.clone(), seed).unwrap(), train.clone(), seed, corpus.to_vec()).unwrap();
    let mut full = fresh();
    let full_logs: Vec<_> = (0..train.steps).map(|_| full.step_once().unwrap()).collect();

    let mut first = fresh();
    let mut logs: Vec<_> = (0..split).map(|_| first.step_once().unwrap()).collect();
    let path = dir.join("resume.tsf");
    checkpoint::save(&path, &first.model, Some(&first.opt), seed, first.step, serde_json::Value::Null).unwrap();
    drop(first);
    let ck = checkpoint::load(&path).unwrap();
    let mut second = Trainer::new(ck.model, train.clone(), ck.seed, corpus.to_vec())
        .unwrap()
        .resume(ck.opt.unwrap(), ck.step)
        .unwrap();
    while !second.is_done() {
        logs.push(second.step_once().unwrap());
    }
    let same = second.model.store() == full.model.store() && second.opt == full.opt && logs == full_logs;
    Outcome::new(same, format!("resumed at {split} of {}, identical={same}", train.steps))
}

/// Save, load and forecast equals the in-memory forecast bit for bit.
pub fn checkpoint_forecast_identical(model: &Model<f32>, dir: &std::path::Path) -> Outcome {
    let path = dir.join("roundtrip.tsf");
    checkpoint::save(&path, model, None, 0, 0, serde_json::Value::Null).unwrap();
    let loaded = checkpoint::load(&path).unwrap().model;
    let req = ForecastRequest {
        context: (0..model.config().context_len + 7).map(|t| (t as f64 * 0.11).sin() * 5.0 + 2.0).collect(),
        horizon: 3 * model.config().output_patch + 1,
        quantiles: None,
    };
    let a = forecast(model, &req).unwrap();
    let b = forecast(&loaded, &req).unwrap();
    let bits = |r: &tsfound_core::ForecastResult| -> Vec<u64> {
        r.point.iter().chain(r.quantiles.iter().flatten()).map(|v| v.to_bits()).collect()
    };
    let same = bits(&a) == bits(&b);
    Outcome::new(same, format!("{} values compared, identical={same}", bits(&a).len()))
}

/// Bias-only quantile head fit with the library's pinball loss and AdamW to
/// samples of a skewed distribution; returns the worst decile gap.
pub fn pinball_optimality(samples: usize, seed: u64) -> Outcome {
    use tsfound_core::tape::LossSpec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // log-normal(0, 0.6): right-skewed
    let data: Vec<f64> = (0..samples)
        .map(|_| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            (0.6 * z).exp()
        })
        .collect();
    let levels: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    let mut params = vec![vec![0.0f64; levels.len() + 1]];
    let mut opt = AdamW {
        m: vec![vec![0.0; levels.len() + 1]],
        v: vec![vec![0.0; levels.len() + 1]],
    };
    let cfg = TrainConfig {
        steps: 600,
        lr: 0.05,
        weight_decay: 0.0,
        grad_clip: None,
        ..TrainConfig::default()
    };
    for step in 0..cfg.steps {
        let grads = {
            let mut tape = Tape::new();
            let b = tape.param(0, &params[0], 1, levels.len() + 1);
            let rows = tape.gather_rows(b, vec![0; samples]);
            let loss = tape.forecast_loss(
                rows,
                data.clone(),
                LossSpec {
                    patch_len: 1,
                    quantiles: levels.clone(),
                    batch: samples,
                    point_weight: 0.0,
                    quantile_weight: 1.0,
                },
            );
            let g = tape.param_grads(tape.backward(loss));
            vec![g.get(&0).cloned()]
        };
        let lr = tsfound_core::training::scheduled_lr(&cfg, step);
        opt.update(&mut params, &grads, step, lr, &cfg);
    }
    let mut sorted = data.clone();
    sorted.sort_by(f64::total_cmp);
    let mut worst: f64 = 0.0;
    for (c, &q) in levels.iter().enumerate() {
        let idx = ((q * samples as f64).ceil() as usize).clamp(1, samples) - 1;
        worst = worst.max((params[0][1 + c] - sorted[idx]).abs());
    }
    Outcome::new(worst <= 0.05, format!("{samples} log-normal samples, worst decile gap {worst:.4}"))
}

// ------------------------------------------------------------ protocols

/// Seasonal series with the given period for protocol and zero-shot tests.
pub fn seasonal_series(id: &str, len: usize, period: usize, rng: &mut ChaCha8Rng) -> TimeSeries {
    let amp = rng.random_range(1.0..4.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let level = rng.random_range(-5.0..5.0);
    let values = (0..len)
        .map(|t| {
            let s = std::f64::consts::TAU * t as f64 / period as f64 + phase;
            level + amp * s.sin() + 0.3 * amp * (2.0 * s).cos() + 0.1 * rng.random_range(-1.0..1.0)
        })
        .collect();
    TimeSeries::new(id, "H", values).unwrap()
}

/// Naive against itself aggregates to exactly 1 and rolling window counts
/// follow the closed form.
pub fn protocol_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let datasets: Vec<DatasetSpec> = [(12usize, 60usize), (7, 90), (24, 200)]
        .iter()
        .enumerate()
        .map(|(k, &(m, len))| {
            let series = (0..3).map(|i| seasonal_series(&format!("s{k}_{i}"), len, m, &mut rng)).collect();
            DatasetSpec::new(format!("ds{k}"), "", 8, Some(m), series).unwrap()
        })
        .collect();
    let lw = last_window_eval(&datasets, &DatasetNaive).unwrap();
    let self_one = lw.aggregate_mase.value == Some(1.0)
        && lw.aggregate_smape.value == Some(1.0)
        && lw.rows.iter().all(|r| r.relative.mase == Some(1.0) && r.relative.smape == Some(1.0));

    let mut counts_ok = true;
    for (region, c, h, stride) in [(608usize, 512usize, 96usize, 1usize), (700, 512, 96, 24), (1000, 100, 30, 7), (50, 40, 20, 1)] {
        let want = if region < c + h { 0 } else { (region - c - h) / stride + 1 };
        let starts = rolling_window_starts(region, c, h, stride);
        counts_ok &= starts.len() == want && starts.iter().enumerate().all(|(i, &s)| s == i * stride);
    }
    // full rolling pass: series of length 1000, default last 20% test split
    let series = vec![seasonal_series("r", 1000, 24, &mut rng)];
    let ds = DatasetSpec::new("toy", "H", 24, Some(24), series).unwrap();
    let opts = RollingOptions {
        context_len: 64,
        horizons: vec![16, 32],
        stride: Some(8),
    };
    let report = rolling_eval(&[ds], &DatasetNaive, &opts).unwrap();
    let region = 200 + 64;
    for row in report.rows.iter().filter(|r| r.horizon.is_some()) {
        let h = row.horizon.unwrap();
        counts_ok &= row.windows == (region - 64 - h) / 8 + 1;
    }
    Outcome::new(
        self_one && counts_ok,
        format!(
            "naive self-relative aggregate mase {:?} smape {:?}; window counts match={counts_ok}",
            lw.aggregate_mase.value, lw.aggregate_smape.value
        ),
    )
}

/// Last-window metrics recomputed by a hand-rolled loop over series.
pub fn last_window_oracle(datasets: &[DatasetSpec], forecast_fn: impl Fn(&DatasetSpec, &[f64], usize) -> Vec<f64>) -> Vec<(String, f64, f64)> {
    datasets
        .iter()
        .map(|ds| {
            let h = ds.horizon;
            let (mut m_mase, mut b_mase, mut m_smape, mut b_smape) = (0.0, 0.0, 0.0, 0.0);
            let n = ds.series.len() as f64;
            for s in &ds.series {
                let v = s.values();
                let ctx = &v[..v.len() - h];
                let truth = &v[v.len() - h..];
                let pred = forecast_fn(ds, ctx, h);
                let naive: Vec<f64> = (0..h).map(|t| ctx[ctx.len() - ds.period + t % ds.period]).collect();
                m_mase += oracle_mase(truth, &pred, ctx, ds.period);
                b_mase += oracle_mase(truth, &naive, ctx, ds.period);
                m_smape += oracle_smape(truth, &pred);
                b_smape += oracle_smape(truth, &naive);
            }
            (ds.name.clone(), (m_mase / n) / (b_mase / n), (m_smape / n) / (b_smape / n))
        })
        .collect()
}

/// Held-out zero-shot set: one dataset per series, each a GP draw from a
/// periodic kernel with integer period plus smooth drift and noise, seeded
/// from a stream the training corpus never uses.
pub fn heldout_seasonal(n: usize, len: usize, horizon: usize, seed: u64) -> Vec<DatasetSpec> {
    use tsfound_core::synth::{gp_synth, GpKernelSpec, Kernel};
    let mut rng = ChaCha8Rng::seed_from_u64(tsfound_core::seed::sub_seed(seed, "heldout"));
    (0..n)
        .map(|i| {
            let period = [12usize, 24, 48][i % 3];
            let kernel = Kernel::Sum(
                Box::new(Kernel::Periodic {
                    period: period as f64,
                    length_scale: rng.random_range(0.7..1.5),
                    amplitude: 1.0,
                }),
                Box::new(Kernel::Sum(
                    Box::new(Kernel::Rbf {
                        length_scale: rng.random_range(60.0..150.0),
                        amplitude: rng.random_range(0.1..0.5),
                    }),
                    Box::new(Kernel::WhiteNoise {
                        amplitude: rng.random_range(0.005..0.05),
                    }),
                )),
            );
            let spec = GpKernelSpec {
                kernel,
                length: len,
                seed: rng.random(),
            };
            let level = rng.random_range(-3.0..3.0);
            let scale = rng.random_range(0.5..5.0);
            let raw = gp_synth(&spec, format!("heldout_{i:02}"), "H").unwrap();
            let values = raw.values().iter().map(|v| level + scale * v).collect();
            let series = TimeSeries::new(raw.id.clone(), "H", values).unwrap();
            DatasetSpec::new(raw.id, "H", horizon, Some(period), vec![series]).unwrap()
        })
        .collect()
}
