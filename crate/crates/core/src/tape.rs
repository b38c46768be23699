//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and enough cached state to run the vector-Jacobian product later.
//! [`Tape::backward`] walks the nodes in reverse creation order, so the
//! recording order is a valid topological order by construction.
//!
//! Operations are coarse-grained (whole matmuls, fused multi-head attention,
//! the joint point/quantile loss) so a batch of windows is one tape with a
//! few hundred nodes rather than millions of scalar nodes.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use crate::scalar::{gemm, Scalar, Strided};

/// Additive score penalty for inadmissible keys. Large enough that `exp`
/// underflows to exactly zero in both precisions.
pub const MASK_PENALTY: f64 = -1e9;

const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape and masking of one fused multi-head attention call over a batch of
/// equal-length sequences stacked along rows.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `batch * q_len * k_len`, true where the key is admissible.
    pub mask: Arc<Vec<bool>>,
    /// `q_len * k_len` relative-position bucket per (query, key), shared by
    /// every sequence in the batch. `None` disables the position bias.
    pub buckets: Option<Arc<Vec<usize>>>,
}

/// Weights and layout of the joint point + quantile objective.
#[derive(Clone, Debug)]
pub struct LossSpec<T> {
    pub patch_len: usize,
    pub quantiles: Vec<T>,
    pub batch: usize,
    pub point_weight: T,
    pub quantile_weight: T,
}

/// Per-batch means of the two loss terms, recorded by the loss node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub mse: T,
    pub ql: T,
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    layout: AttentionLayout,
    scale: T,
    probs: Vec<T>,
}

struct LossCache<T> {
    pred: Var,
    targets: Vec<T>,
    spec: LossSpec<T>,
    terms: LossTerms<T>,
}

enum Op<T> {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Vec<T>),
    Gelu(Var),
    RmsNorm { x: Var, weight: Var, inv_rms: Vec<T> },
    Attention(Box<AttentionCache<T>>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    MeanRowGroups { x: Var, group: usize },
    ForecastLoss(Box<LossCache<T>>),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, [T]>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Loss terms recorded by a [`Tape::forecast_loss`] node.
    pub fn loss_terms(&self, v: Var) -> Option<LossTerms<T>> {
        match &self.nodes[v.0].op {
            Op::ForecastLoss(c) => Some(c.terms),
            _ => None,
        }
    }

    /// Attention probabilities `[batch, heads, q_len, k_len]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Cow<'p, [T]>, rows: usize, cols: usize, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; gradients never flow into it.
    pub fn input(&mut self, values: Vec<T>, rows: usize, cols: usize) -> Var {
        assert_eq!(values.len(), rows * cols, "input shape");
        self.push(Cow::Owned(values), rows, cols, Op::Constant, false)
    }

    /// A trainable leaf borrowed from parameter storage. Repeated calls with
    /// the same id return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, id: usize, values: &'p [T], rows: usize, cols: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        assert_eq!(values.len(), rows * cols, "param shape");
        let v = self.push(Cow::Borrowed(values), rows, cols, Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Like [`Tape::param`] but recorded as a constant.
    pub fn frozen(&mut self, values: &'p [T], rows: usize, cols: usize) -> Var {
        self.push(Cow::Borrowed(values), rows, cols, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            Strided::row_major(0, k),
            self.value(b),
            Strided::row_major(0, n),
            T::zero(),
            &mut out,
            Strided::row_major(0, n),
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), m, n, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (r, c) = self.shape(a);
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), r, c, Op::Add(a, b), ng)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shapes");
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Cow::Owned(out), r, c, Op::AddRow(a, row), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<T>) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(factor.len(), r * c);
        let out = self
            .value(a)
            .iter()
            .zip(&factor)
            .map(|(&x, &f)| x * f)
            .collect();
        let ng = self.needs(a);
        self.push(Cow::Owned(out), r, c, Op::MulConst(a, factor), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.needs(a);
        self.push(Cow::Owned(out), r, c, Op::Gelu(a), ng)
    }

    /// Row-wise RMS normalization with a learned `1 x cols` gain and no bias.
    pub fn rms_norm(&mut self, x: Var, weight: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(weight), (1, c), "rms_norm weight");
        let eps = T::from_f64(RMS_EPS);
        let n = T::from_f64(c as f64);
        let xs = self.value(x);
        let w = self.value(weight);
        let mut out = vec![T::zero(); r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for (row, orow) in xs.chunks(c).zip(out.chunks_mut(c)) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in orow.iter_mut().zip(row).zip(w) {
                *o = v * inv * g;
            }
        }
        let ng = self.needs(x) || self.needs(weight);
        self.push(Cow::Owned(out), r, c, Op::RmsNorm { x, weight, inv_rms }, ng)
    }

    /// Fused multi-head scaled dot-product attention with optional bucketed
    /// position bias (`bias_table` is `buckets x heads`) and key masking.
    /// Output is the concatenation of head outputs, `batch*q_len x d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias_table: Option<Var>, layout: AttentionLayout) -> Var {
        let (qr, d) = self.shape(q);
        assert_eq!(qr, layout.batch * layout.q_len, "attention query rows");
        assert_eq!(self.shape(k), (layout.batch * layout.k_len, d), "attention key shape");
        assert_eq!(self.shape(v), (layout.batch * layout.k_len, d), "attention value shape");
        assert_eq!(d % layout.heads, 0, "heads must divide width");
        assert_eq!(layout.mask.len(), layout.batch * layout.q_len * layout.k_len);
        if let Some(b) = &layout.buckets {
            assert_eq!(b.len(), layout.q_len * layout.k_len);
            assert!(bias_table.is_some(), "buckets without a bias table");
        }
        let dh = d / layout.heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let bias = bias_table.map(|b| self.value(b));
        let (probs, out) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            bias,
            &layout,
            d,
            scale,
        );
        let ng = self.needs(q) || self.needs(k) || self.needs(v) || bias_table.is_some_and(|b| self.needs(b));
        let rows = layout.batch * layout.q_len;
        self.push(
            Cow::Owned(out),
            rows,
            d,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                bias: bias_table,
                layout,
                scale,
                probs,
            })),
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows width");
            out.extend_from_slice(self.value(p));
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(out), rows, cols, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let (r, c) = self.shape(x);
        let xs = self.value(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            assert!(i < r, "gather_rows index {i} out of {r}");
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        let rows = index.len();
        self.push(Cow::Owned(out), rows, c, Op::GatherRows { x, index }, ng)
    }

    /// Averages each run of `group` consecutive rows into one row.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(group > 0 && r % group == 0, "mean_row_groups: {r} rows, group {group}");
        let inv = T::one() / T::from_f64(group as f64);
        let xs = self.value(x);
        let mut out = vec![T::zero(); (r / group) * c];
        for (g, orow) in out.chunks_mut(c).enumerate() {
            for i in 0..group {
                let src = &xs[(g * group + i) * c..(g * group + i + 1) * c];
                for (o, &s) in orow.iter_mut().zip(src) {
                    *o += s;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.needs(x);
        self.push(Cow::Owned(out), r / group, c, Op::MeanRowGroups { x, group }, ng)
    }

    /// Joint objective over head outputs `pred` (`rows x patch_len*(Q+1)`,
    /// point then quantiles per step) against `targets` (`rows x patch_len`).
    /// Value is `point_weight * mse + quantile_weight * ql`, each averaged over
    /// the horizon of a sample and then over the batch.
    pub fn forecast_loss(&mut self, pred: Var, targets: Vec<T>, spec: LossSpec<T>) -> Var {
        let (rows, cols) = self.shape(pred);
        let width = spec.quantiles.len() + 1;
        assert_eq!(cols, spec.patch_len * width, "loss: head width");
        assert_eq!(targets.len(), rows * spec.patch_len, "loss: targets");
        assert!(spec.batch > 0 && rows % spec.batch == 0, "loss: batch");
        let denom = T::from_f64((rows * spec.patch_len) as f64);
        let p = self.value(pred);
        let mut se = T::zero();
        let mut pin = T::zero();
        for (r, trow) in targets.chunks(spec.patch_len).enumerate() {
            let prow = &p[r * cols..(r + 1) * cols];
            for (i, &x) in trow.iter().enumerate() {
                let cell = &prow[i * width..(i + 1) * width];
                let e = x - cell[0];
                se += e * e;
                for (&q, &xq) in spec.quantiles.iter().zip(&cell[1..]) {
                    pin += pinball(x, xq, q);
                }
            }
        }
        // Every sample has the same horizon, so the mean over samples of the
        // per-sample 1/H sums is one division by B*H.
        let terms = LossTerms {
            mse: se / denom,
            ql: pin / denom,
        };
        let total = spec.point_weight * terms.mse + spec.quantile_weight * terms.ql;
        let ng = self.needs(pred);
        self.push(
            Cow::Owned(vec![total]),
            1,
            1,
            Op::ForecastLoss(Box::new(LossCache {
                pred,
                targets,
                spec,
                terms,
            })),
            ng,
        )
    }

    /// Gradients of the scalar `root` with respect to every node, indexed by
    /// node. Entries are `None` for nodes that do not influence `root` or do
    /// not need gradients.
    pub fn backward(&self, root: Var) -> Vec<Option<Vec<T>>> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        grads
    }

    /// Collects per-parameter gradients (by param id) out of [`Tape::backward`] output.
    pub fn param_grads(&self, mut node_grads: Vec<Option<Vec<T>>>) -> HashMap<usize, Vec<T>> {
        self.params
            .iter()
            .filter_map(|(&id, v)| node_grads[v.0].take().map(|g| (id, g)))
            .collect()
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.rows * node.cols]))
    }

    fn backprop(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if let Some(ga) = self.slot(grads, *a) {
                    // dA += dC @ B^T
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        Strided::row_major(0, n),
                        self.value(*b),
                        Strided::transposed(0, n),
                        T::one(),
                        ga,
                        Strided::row_major(0, k),
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB += A^T @ dC
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a),
                        Strided::transposed(0, k),
                        g,
                        Strided::row_major(0, n),
                        T::one(),
                        gb,
                        Strided::row_major(0, n),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        for (o, &x) in gv.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                let c = node.cols;
                if let Some(gr) = self.slot(grads, *row) {
                    for chunk in g.chunks(c) {
                        for (o, &x) in gr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::MulConst(a, factor) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &x), &f) in ga.iter_mut().zip(g).zip(factor) {
                        *o += x * f;
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &x), &dy) in ga.iter_mut().zip(xs).zip(g) {
                        *o += dy * gelu_grad(x);
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let c = node.cols;
                let n = T::from_f64(c as f64);
                let xs = self.value(*x);
                let w = self.value(*weight);
                if let Some(gw) = self.slot(grads, *weight) {
                    for ((row, dy), &inv) in xs.chunks(c).zip(g.chunks(c)).zip(inv_rms) {
                        for ((o, &v), &d) in gw.iter_mut().zip(row).zip(dy) {
                            *o += d * v * inv;
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (((row, dy), &inv), grow) in xs.chunks(c).zip(g.chunks(c)).zip(inv_rms).zip(gx.chunks_mut(c)) {
                        // d/dx of x * inv(x) * w, with inv = (mean(x^2) + eps)^(-1/2)
                        let dot: T = row.iter().zip(dy).zip(w).map(|((&v, &d), &gg)| v * d * gg).sum();
                        let coef = dot * inv * inv * inv / n;
                        for (((o, &v), &d), &gg) in grow.iter_mut().zip(row).zip(dy).zip(w) {
                            *o += d * gg * inv - v * coef;
                        }
                    }
                }
            }
            Op::Attention(cache) => self.attention_backward(cache, node.cols, g, grads),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = {
                        let (r, c) = self.shape(p);
                        r * c
                    };
                    if let Some(gp) = self.slot(grads, p) {
                        for (o, &x) in gp.iter_mut().zip(&g[off..off + len]) {
                            *o += x;
                        }
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, index } => {
                let c = node.cols;
                if let Some(gx) = self.slot(grads, *x) {
                    for (dst, src) in index.iter().zip(g.chunks(c)) {
                        for (o, &v) in gx[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MeanRowGroups { x, group } => {
                let c = node.cols;
                let inv = T::one() / T::from_f64(*group as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    for (gi, grow) in g.chunks(c).enumerate() {
                        for i in 0..*group {
                            let dst = &mut gx[(gi * group + i) * c..(gi * group + i + 1) * c];
                            for (o, &v) in dst.iter_mut().zip(grow) {
                                *o += v * inv;
                            }
                        }
                    }
                }
            }
            Op::ForecastLoss(cache) => {
                let spec = &cache.spec;
                let (rows, cols) = self.shape(cache.pred);
                let width = spec.quantiles.len() + 1;
                let denom = T::from_f64((rows * spec.patch_len) as f64);
                let p = self.value(cache.pred);
                let upstream = g[0];
                let two = T::from_f64(2.0);
                if let Some(gp) = self.slot(grads, cache.pred) {
                    let wp = upstream * spec.point_weight / denom;
                    let wq = upstream * spec.quantile_weight / denom;
                    for (r, trow) in cache.targets.chunks(spec.patch_len).enumerate() {
                        for (i, &x) in trow.iter().enumerate() {
                            let base = r * cols + i * width;
                            gp[base] += wp * two * (p[base] - x);
                            for (c, &q) in spec.quantiles.iter().enumerate() {
                                gp[base + 1 + c] += wq * pinball_grad(x, p[base + 1 + c], q);
                            }
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(&self, cache: &AttentionCache<T>, d: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let lay = &cache.layout;
        let (tq, tk, nh) = (lay.q_len, lay.k_len, lay.heads);
        let dh = d / nh;
        let qv = self.value(cache.q);
        let kv = self.value(cache.k);
        let vv = self.value(cache.v);

        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dbias = cache.bias.map(|b| vec![T::zero(); self.value(b).len()]);
        let mut dp = vec![T::zero(); tk];

        for b in 0..lay.batch {
            for h in 0..nh {
                let p_off = (b * nh + h) * tq * tk;
                let q_off = b * tq * d + h * dh;
                let k_off = b * tk * d + h * dh;
                for i in 0..tq {
                    let probs = &cache.probs[p_off + i * tk..p_off + (i + 1) * tk];
                    let qi = q_off + i * d;
                    let go = &g[qi..qi + dh];
                    for j in 0..tk {
                        let kj = k_off + j * d;
                        dp[j] = dot(go, &vv[kj..kj + dh]);
                        if probs[j] != T::zero() {
                            axpy(probs[j], go, &mut dv[kj..kj + dh]);
                        }
                    }
                    // softmax backward: dS = P * (dP - <dP, P>)
                    let inner = dot(probs, &dp[..tk]);
                    for (x, &pp) in dp[..tk].iter_mut().zip(probs) {
                        *x = pp * (*x - inner);
                    }
                    if let (Some(db), Some(buckets)) = (dbias.as_mut(), lay.buckets.as_ref()) {
                        for (j, &s) in dp[..tk].iter().enumerate() {
                            db[buckets[i * tk + j] * nh + h] += s;
                        }
                    }
                    for j in 0..tk {
                        if dp[j] == T::zero() {
                            continue;
                        }
                        let ds = cache.scale * dp[j];
                        let kj = k_off + j * d;
                        axpy(ds, &kv[kj..kj + dh], &mut dq[qi..qi + dh]);
                        axpy(ds, &qv[qi..qi + dh], &mut dk[kj..kj + dh]);
                    }
                }
            }
        }

        let mut accumulate = |v: Var, src: Vec<T>| {
            if let Some(dst) = self.slot(grads, v) {
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += x;
                }
            }
        };
        accumulate(cache.q, dq);
        accumulate(cache.k, dk);
        accumulate(cache.v, dv);
        if let (Some(b), Some(db)) = (cache.bias, dbias) {
            accumulate(b, db);
        }
    }
}

/// Forward pass of fused attention, returning `(probs, output)`.
fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    lay: &AttentionLayout,
    d: usize,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let (tq, tk, nh) = (lay.q_len, lay.k_len, lay.heads);
    let dh = d / nh;
    let penalty = T::from_f64(MASK_PENALTY);
    let mut probs = vec![T::zero(); lay.batch * nh * tq * tk];
    let mut out = vec![T::zero(); lay.batch * tq * d];
    for b in 0..lay.batch {
        let mask = &lay.mask[b * tq * tk..(b + 1) * tq * tk];
        for h in 0..nh {
            let p_off = (b * nh + h) * tq * tk;
            let q_off = b * tq * d + h * dh;
            let k_off = b * tk * d + h * dh;
            for i in 0..tq {
                let qi = q_off + i * d;
                let qrow = &q[qi..qi + dh];
                let row = &mut probs[p_off + i * tk..p_off + (i + 1) * tk];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = k_off + j * d;
                    *s = scale * dot(qrow, &k[kj..kj + dh]);
                    if let (Some(table), Some(buckets)) = (bias, lay.buckets.as_ref()) {
                        *s += table[buckets[i * tk + j] * nh + h];
                    }
                    if !mask[i * tk + j] {
                        *s += penalty;
                    }
                }
                softmax_in_place(row);
                let orow = &mut out[qi..qi + dh];
                for (j, &p) in row.iter().enumerate() {
                    if p != T::zero() {
                        let kj = k_off + j * d;
                        axpy(p, &v[kj..kj + dh], orow);
                    }
                }
            }
        }
    }
    (probs, out)
}

/// Dot product with eight independent accumulators in a fixed order, so the
/// result is deterministic and the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).act_tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).act_tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Pinball loss of quantile forecast `xq` at level `q` for observation `x`.
pub fn pinball<T: Scalar>(x: T, xq: T, q: T) -> T {
    let zero = T::zero();
    q * (x - xq).max(zero) + (T::one() - q) * (xq - x).max(zero)
}

/// Subgradient of [`pinball`] with respect to `xq` (zero at the kink).
fn pinball_grad<T: Scalar>(x: T, xq: T, q: T) -> T {
    if x > xq {
        -q
    } else if x < xq {
        T::one() - q
    } else {
        T::zero()
    }
}
