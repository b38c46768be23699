//! Synthetic training series: Gaussian-process sample paths drawn from
//! composite kernels, and convex mixtures of standardized series.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::sub_seed;
use crate::series::{pad_left, standard_scale, TimeSeries};

const BASE_JITTER: f64 = 1e-8;
const MAX_JITTER: f64 = 1e-4;
pub const MAX_KERNEL_DEPTH: usize = 3;

/// Covariance function on an evenly spaced integer grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `amplitude * exp(-(t - t')^2 / (2 l^2))`, `l` in steps.
    Rbf { length_scale: f64, amplitude: f64 },
    /// `amplitude * exp(-2 sin^2(pi |t - t'| / period) / l^2)`.
    Periodic {
        period: f64,
        length_scale: f64,
        amplitude: f64,
    },
    /// `amplitude * (x - offset)(x' - offset)` with `x = t / (len - 1)`.
    Linear { amplitude: f64, offset: f64 },
    WhiteNoise { amplitude: f64 },
    Sum(Box<Kernel>, Box<Kernel>),
    Product(Box<Kernel>, Box<Kernel>),
}

impl Kernel {
    pub fn depth(&self) -> usize {
        match self {
            Kernel::Sum(a, b) | Kernel::Product(a, b) => 1 + a.depth().max(b.depth()),
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() > MAX_KERNEL_DEPTH {
            return Err(Error::InvalidInput(format!(
                "kernel depth {} exceeds {MAX_KERNEL_DEPTH}",
                self.depth()
            )));
        }
        self.validate_leaves()
    }

    fn validate_leaves(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("kernel {name} must be positive, got {v}")))
            }
        };
        match self {
            Kernel::Rbf {
                length_scale,
                amplitude,
            } => {
                positive("length_scale", *length_scale)?;
                positive("amplitude", *amplitude)
            }
            Kernel::Periodic {
                period,
                length_scale,
                amplitude,
            } => {
                positive("period", *period)?;
                positive("length_scale", *length_scale)?;
                positive("amplitude", *amplitude)
            }
            Kernel::Linear { amplitude, offset } => {
                positive("amplitude", *amplitude)?;
                if offset.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidInput("kernel offset must be finite".into()))
                }
            }
            Kernel::WhiteNoise { amplitude } => positive("amplitude", *amplitude),
            Kernel::Sum(a, b) | Kernel::Product(a, b) => {
                a.validate_leaves()?;
                b.validate_leaves()
            }
        }
    }

    /// Covariance between grid indices `i` and `j` on a grid of `len` points.
    pub fn eval(&self, i: usize, j: usize, len: usize) -> f64 {
        let dt = i as f64 - j as f64;
        match self {
            Kernel::Rbf {
                length_scale,
                amplitude,
            } => amplitude * (-dt * dt / (2.0 * length_scale * length_scale)).exp(),
            Kernel::Periodic {
                period,
                length_scale,
                amplitude,
            } => {
                let s = (std::f64::consts::PI * dt.abs() / period).sin();
                amplitude * (-2.0 * s * s / (length_scale * length_scale)).exp()
            }
            Kernel::Linear { amplitude, offset } => {
                let scale = (len.max(2) - 1) as f64;
                amplitude * (i as f64 / scale - offset) * (j as f64 / scale - offset)
            }
            Kernel::WhiteNoise { amplitude } => {
                if i == j {
                    *amplitude
                } else {
                    0.0
                }
            }
            Kernel::Sum(a, b) => a.eval(i, j, len) + b.eval(i, j, len),
            Kernel::Product(a, b) => a.eval(i, j, len) * b.eval(i, j, len),
        }
    }

    fn leaf_names(&self, out: &mut Vec<&'static str>) {
        match self {
            Kernel::Rbf { .. } => out.push("rbf"),
            Kernel::Periodic { .. } => out.push("periodic"),
            Kernel::Linear { .. } => out.push("linear"),
            Kernel::WhiteNoise { .. } => out.push("white_noise"),
            Kernel::Sum(a, b) | Kernel::Product(a, b) => {
                a.leaf_names(out);
                b.leaf_names(out);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpKernelSpec {
    pub kernel: Kernel,
    pub length: usize,
    pub seed: u64,
}

/// Draws one sample path of a zero-mean Gaussian process.
pub fn gp_synth(spec: &GpKernelSpec, id: impl Into<String>, freq: impl Into<String>) -> Result<TimeSeries> {
    spec.kernel.validate()?;
    if spec.length == 0 {
        return Err(Error::InvalidInput("gp length must be positive".into()));
    }
    let n = spec.length;
    let cov = DMatrix::from_fn(n, n, |i, j| spec.kernel.eval(i, j, n));
    let chol = factor_with_jitter(cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let path = chol.l() * z;
    TimeSeries::new(id, freq, path.iter().copied().collect())
}

fn factor_with_jitter(cov: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut jitter = BASE_JITTER;
    loop {
        let mut m = cov.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok(c);
        }
        if jitter >= MAX_JITTER {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        jitter *= 10.0;
    }
}

/// Pointwise convex combination of up to three series, each standardized on
/// its own and left-padded (or truncated to the most recent points) to
/// `target_len` first.
pub fn ts_mixup(series: &[TimeSeries], weights: &[f64], target_len: usize, id: impl Into<String>) -> Result<TimeSeries> {
    if series.is_empty() || series.len() > 3 {
        return Err(Error::InvalidInput(format!("mixup takes 1 to 3 series, got {}", series.len())));
    }
    if weights.len() != series.len() {
        return Err(Error::LengthMismatch {
            expected: series.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidInput("mixup weights must be nonnegative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::WeightsNotNormalized { sum });
    }
    let mut out = vec![0.0; target_len];
    for (s, &w) in series.iter().zip(weights) {
        let v = s.values();
        let recent = &v[v.len().saturating_sub(target_len)..];
        let (padded, mask) = pad_left(recent, target_len)?;
        let scaled = standard_scale(&padded, &mask)?;
        for (o, x) in out.iter_mut().zip(scaled.values) {
            *o += w * x;
        }
    }
    TimeSeries::new(id, series[0].freq.clone(), out)
}

/// Recipe for a synthetic pre-training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_series: usize,
    pub length: usize,
    /// Probability that a corpus entry is a mixup of fresh GP draws.
    #[serde(default)]
    pub mixup_rate: f64,
    /// Maximum number of base kernels combined per draw (1 to 4).
    #[serde(default = "default_max_kernels")]
    pub max_kernels: usize,
    /// Candidate seasonal periods, in steps, for periodic kernels.
    #[serde(default = "default_periods")]
    pub periods: Vec<f64>,
}

fn default_max_kernels() -> usize {
    3
}

fn default_periods() -> Vec<f64> {
    vec![4.0, 7.0, 12.0, 24.0, 30.0, 48.0, 52.0, 96.0]
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_series == 0 {
            return Err(Error::Config("no generators configured".into()));
        }
        if self.length < 2 {
            return Err(Error::Config("synthetic length must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.mixup_rate) {
            return Err(Error::Config(format!("mixup_rate {} outside [0, 1]", self.mixup_rate)));
        }
        if !(1..=4).contains(&self.max_kernels) {
            return Err(Error::Config(format!("max_kernels {} outside 1..=4", self.max_kernels)));
        }
        if self.periods.is_empty() || self.periods.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config("periods must be a nonempty list of positive values".into()));
        }
        Ok(())
    }
}

/// Summary written next to a generated corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub num_series: usize,
    pub gp_series: usize,
    pub mixup_series: usize,
    pub seed: u64,
    pub length: usize,
    pub kernel_histogram: BTreeMap<String, usize>,
}

fn random_base_kernel<R: Rng>(rng: &mut R, len: usize, periods: &[f64]) -> Kernel {
    let amplitude = rng.random_range(0.5..2.0);
    match rng.random_range(0..10) {
        0..=3 => Kernel::Periodic {
            period: periods[rng.random_range(0..periods.len())],
            length_scale: rng.random_range(0.5..2.0),
            amplitude,
        },
        4..=5 => Kernel::Rbf {
            length_scale: len as f64 * [0.02, 0.05, 0.1, 0.3][rng.random_range(0..4)],
            amplitude,
        },
        6..=7 => Kernel::Linear {
            amplitude,
            offset: rng.random_range(-0.5..1.5),
        },
        _ => Kernel::WhiteNoise {
            amplitude: rng.random_range(0.01..0.2),
        },
    }
}

/// Combines 1..=`max_kernels` random base kernels with random sums and products.
pub fn random_kernel<R: Rng>(rng: &mut R, len: usize, max_kernels: usize, periods: &[f64]) -> Kernel {
    let count = rng.random_range(1..=max_kernels.max(1));
    let mut k = random_base_kernel(rng, len, periods);
    for _ in 1..count {
        let next = random_base_kernel(rng, len, periods);
        k = if rng.random_bool(0.5) {
            Kernel::Sum(Box::new(k), Box::new(next))
        } else {
            Kernel::Product(Box::new(k), Box::new(next))
        };
    }
    k
}

enum Entry {
    Gp(TimeSeries, Vec<&'static str>),
    Mix(TimeSeries, Vec<&'static str>),
}

fn synth_entry(cfg: &SynthConfig, seed: u64, index: usize) -> Result<Entry> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("series/{index}")));
    let id = format!("synth-{index:06}");
    let draw = |rng: &mut ChaCha8Rng, part: usize| -> Result<(TimeSeries, Vec<&'static str>)> {
        let kernel = random_kernel(rng, cfg.length, cfg.max_kernels, &cfg.periods);
        let mut names = Vec::new();
        kernel.leaf_names(&mut names);
        let spec = GpKernelSpec {
            kernel,
            length: cfg.length,
            seed: rng.random(),
        };
        let s = gp_synth(&spec, format!("{id}/{part}"), "synthetic")?;
        Ok((s, names))
    };
    if cfg.mixup_rate > 0.0 && rng.random_bool(cfg.mixup_rate) {
        let k = rng.random_range(1..=3usize);
        let mut parts = Vec::with_capacity(k);
        let mut names = Vec::new();
        for part in 0..k {
            let (s, n) = draw(&mut rng, part)?;
            parts.push(s);
            names.extend(n);
        }
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        // absorb rounding so the weights sum to one
        let drift = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        let mut mixed = ts_mixup(&parts, &weights, cfg.length, id)?;
        mixed.freq = "synthetic".into();
        Ok(Entry::Mix(mixed, names))
    } else {
        let (mut s, names) = draw(&mut rng, 0)?;
        s.id = id;
        Ok(Entry::Gp(s, names))
    }
}

/// Generates a full corpus. Each entry is seeded independently from `seed`
/// and its index, so the output does not depend on the worker count.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<(Vec<TimeSeries>, CorpusManifest)> {
    cfg.validate()?;
    let entries: Vec<Entry> = (0..cfg.num_series)
        .into_par_iter()
        .map(|i| synth_entry(cfg, seed, i))
        .collect::<Result<_>>()?;
    let mut manifest = CorpusManifest {
        num_series: cfg.num_series,
        seed,
        length: cfg.length,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let (s, names) = match e {
            Entry::Gp(s, n) => {
                manifest.gp_series += 1;
                (s, n)
            }
            Entry::Mix(s, n) => {
                manifest.mixup_series += 1;
                (s, n)
            }
        };
        for n in names {
            *manifest.kernel_histogram.entry(n.to_string()).or_default() += 1;
        }
        out.push(s);
    }
    Ok((out, manifest))
}
