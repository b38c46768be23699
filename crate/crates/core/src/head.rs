//! Joint point and quantile output head.
//!
//! Each decoder output maps to one output patch of `P_o` steps. The flat head
//! output is laid out per step: the point forecast first, then one value per
//! quantile level in ascending order, so entry `(i, c)` sits at
//! `i * (Q + 1) + c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Strictly increasing quantile levels inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileSet(Vec<f64>);

impl QuantileSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Config(format!("quantile levels must lie in (0, 1): {levels:?}")));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("quantile levels must be strictly increasing: {levels:?}")));
        }
        Ok(QuantileSet(levels))
    }

    pub fn deciles() -> Self {
        QuantileSet((1..=9).map(|i| f64::from(i) / 10.0).collect())
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Position of `level`, matched with a small tolerance so that values
    /// parsed from text still resolve.
    pub fn position(&self, level: f64) -> Option<usize> {
        self.0.iter().position(|&q| (q - level).abs() < 1e-9)
    }

    /// Canonical text key for a level, as used in forecast output.
    pub fn label(level: f64) -> String {
        let s = format!("{level}");
        if s.contains('.') {
            s
        } else {
            format!("{s}.0")
        }
    }
}

impl Default for QuantileSet {
    fn default() -> Self {
        QuantileSet::deciles()
    }
}

impl TryFrom<Vec<f64>> for QuantileSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        QuantileSet::new(v)
    }
}

impl From<QuantileSet> for Vec<f64> {
    fn from(q: QuantileSet) -> Self {
        q.0
    }
}

/// Prediction for one output patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPrediction<T> {
    pub point: Vec<T>,
    /// `P_o` rows of `Q` values each.
    pub quantiles: Vec<Vec<T>>,
}

impl<T: Copy> PatchPrediction<T> {
    /// Splits a flat head output of width `patch_len * (q + 1)`.
    pub fn from_flat(raw: &[T], patch_len: usize, q: usize) -> Self {
        assert_eq!(raw.len(), patch_len * (q + 1), "head output width");
        let mut point = Vec::with_capacity(patch_len);
        let mut quantiles = Vec::with_capacity(patch_len);
        for cell in raw.chunks(q + 1) {
            point.push(cell[0]);
            quantiles.push(cell[1..].to_vec());
        }
        PatchPrediction { point, quantiles }
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.point.len() * (1 + self.quantiles.first().map_or(0, Vec::len)));
        for (p, qs) in self.point.iter().zip(&self.quantiles) {
            out.push(*p);
            out.extend_from_slice(qs);
        }
        out
    }
}

/// Fraction of adjacent quantile pairs that cross (`lower > upper`).
pub fn crossing_rate<T: Scalar>(quantiles: &[Vec<T>]) -> f64 {
    let mut pairs = 0usize;
    let mut crossed = 0usize;
    for row in quantiles {
        for w in row.windows(2) {
            pairs += 1;
            crossed += usize::from(w[0] > w[1]);
        }
    }
    if pairs == 0 {
        0.0
    } else {
        crossed as f64 / pairs as f64
    }
}

/// `out = gelu(x W1 + b1) W2 + b2 + x Wr`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub wr: ParamId,
    pub patch_len: usize,
    pub num_quantiles: usize,
}

impl HeadParams {
    pub(crate) fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        d: usize,
        patch_len: usize,
        num_quantiles: usize,
        rng: &mut R,
    ) -> Self {
        let width = patch_len * (num_quantiles + 1);
        let std = 1.0 / (d as f64).sqrt();
        HeadParams {
            w1: store.add("head.w1", d, d, Init::Normal(std), rng),
            b1: store.add("head.b1", 1, d, Init::Zeros, rng),
            w2: store.add("head.w2", d, width, Init::Normal(std), rng),
            b2: store.add("head.b2", 1, width, Init::Zeros, rng),
            wr: store.add("head.wr", d, width, Init::Normal(std), rng),
            patch_len,
            num_quantiles,
        }
    }

    pub(crate) fn param_count(d: usize, patch_len: usize, num_quantiles: usize) -> usize {
        let width = patch_len * (num_quantiles + 1);
        d * d + d + 2 * d * width + width
    }

    pub fn width(&self) -> usize {
        self.patch_len * (self.num_quantiles + 1)
    }

    pub fn forward<'p, T: Scalar>(&self, tape: &mut Tape<'p, T>, store: &'p ParamStore<T>, x: Var) -> Var {
        let w1 = store.var(tape, self.w1);
        let b1 = store.var(tape, self.b1);
        let w2 = store.var(tape, self.w2);
        let b2 = store.var(tape, self.b2);
        let wr = store.var(tape, self.wr);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let y = tape.matmul(h, w2);
        let y = tape.add_row(y, b2);
        let skip = tape.matmul(x, wr);
        tape.add(y, skip)
    }
}
