//! T5-style encoder-decoder over patch tokens.
//!
//! Pre-norm blocks with bias-free RMS normalization, no absolute positions,
//! and a learned relative-position bias per stack shared by all of its
//! layers. Encoder self-attention is bidirectional and ignores padded
//! patches as keys; decoder self-attention is causal; cross-attention has no
//! position bias.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{AttentionLayout, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub buckets: usize,
    pub max_distance: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if self.buckets < 2 || 2 * self.max_distance <= self.buckets {
            return Err(Error::Config(format!(
                "need buckets >= 2 and max_distance > buckets/2 (got {} and {})",
                self.buckets, self.max_distance
            )));
        }
        Ok(())
    }
}

/// T5 relative-position bucket for `relative_position = key - query`.
///
/// Half of the buckets (per direction when bidirectional) hold exact small
/// distances; the rest cover distances up to `max_distance` logarithmically,
/// and anything farther lands in the last bucket.
pub fn relative_bucket(relative_position: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets as i64;
    let mut base = 0i64;
    let mut n = -relative_position;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            base += buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = buckets / 2;
    if n < max_exact {
        return (base + n) as usize;
    }
    // f32 arithmetic mirrors the reference implementation's rounding
    let ratio = (n as f32 / max_exact as f32).ln() / ((max_distance as f64 / max_exact as f64).ln() as f32);
    let large = max_exact + (ratio * (buckets - max_exact) as f32) as i64;
    (base + large.min(buckets - 1)) as usize
}

/// `q_len x k_len` bucket ids with query `i` at position `i + q_offset`.
pub fn bucket_matrix(q_len: usize, k_len: usize, bidirectional: bool, num_buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(q_len * k_len);
    for q in 0..q_len {
        for k in 0..k_len {
            out.push(relative_bucket(k as i64 - q as i64, bidirectional, num_buckets, max_distance));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

impl AttentionParams {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        AttentionParams {
            q: store.add(format!("{prefix}.q"), d, d, Init::Normal(std), rng),
            k: store.add(format!("{prefix}.k"), d, d, Init::Normal(std), rng),
            v: store.add(format!("{prefix}.v"), d, d, Init::Normal(std), rng),
            o: store.add(format!("{prefix}.o"), d, d, Init::Normal(std), rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub wi: ParamId,
    pub wo: ParamId,
}

impl FeedForwardParams {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        FeedForwardParams {
            wi: store.add(format!("{prefix}.wi"), d, d_ff, Init::Normal(1.0 / (d as f64).sqrt()), rng),
            wo: store.add(format!("{prefix}.wo"), d_ff, d, Init::Normal(1.0 / (d_ff as f64).sqrt()), rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attn_norm: ParamId,
    pub attn: AttentionParams,
    pub ffn_norm: ParamId,
    pub ffn: FeedForwardParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_norm: ParamId,
    pub self_attn: AttentionParams,
    pub cross_norm: ParamId,
    pub cross_attn: AttentionParams,
    pub ffn_norm: ParamId,
    pub ffn: FeedForwardParams,
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub enc_bias: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub enc_norm: ParamId,
    pub dec_bias: ParamId,
    pub decoder: Vec<DecoderLayerParams>,
    pub dec_norm: ParamId,
}

impl BackboneParams {
    pub(crate) fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let enc_bias = store.add("enc.rel_bias", cfg.buckets, cfg.heads, Init::Normal(0.02), rng);
        let encoder = (0..cfg.enc_layers)
            .map(|l| EncoderLayerParams {
                attn_norm: store.add(format!("enc.{l}.attn_norm"), 1, d, Init::Ones, rng),
                attn: AttentionParams::new(store, &format!("enc.{l}.attn"), d, rng),
                ffn_norm: store.add(format!("enc.{l}.ffn_norm"), 1, d, Init::Ones, rng),
                ffn: FeedForwardParams::new(store, &format!("enc.{l}.ffn"), d, cfg.d_ff, rng),
            })
            .collect();
        let enc_norm = store.add("enc.final_norm", 1, d, Init::Ones, rng);
        let dec_bias = store.add("dec.rel_bias", cfg.buckets, cfg.heads, Init::Normal(0.02), rng);
        let decoder = (0..cfg.dec_layers)
            .map(|l| DecoderLayerParams {
                self_norm: store.add(format!("dec.{l}.self_norm"), 1, d, Init::Ones, rng),
                self_attn: AttentionParams::new(store, &format!("dec.{l}.self_attn"), d, rng),
                cross_norm: store.add(format!("dec.{l}.cross_norm"), 1, d, Init::Ones, rng),
                cross_attn: AttentionParams::new(store, &format!("dec.{l}.cross_attn"), d, rng),
                ffn_norm: store.add(format!("dec.{l}.ffn_norm"), 1, d, Init::Ones, rng),
                ffn: FeedForwardParams::new(store, &format!("dec.{l}.ffn"), d, cfg.d_ff, rng),
            })
            .collect();
        let dec_norm = store.add("dec.final_norm", 1, d, Init::Ones, rng);
        BackboneParams {
            enc_bias,
            encoder,
            enc_norm,
            dec_bias,
            decoder,
            dec_norm,
        }
    }

    pub(crate) fn param_count(cfg: &BackboneConfig) -> usize {
        let d = cfg.d_model;
        let attn = 4 * d * d;
        let ffn = 2 * d * cfg.d_ff;
        let bias = cfg.buckets * cfg.heads;
        let enc = cfg.enc_layers * (attn + ffn + 2 * d) + d + bias;
        let dec = cfg.dec_layers * (2 * attn + ffn + 3 * d) + d + bias;
        enc + dec
    }
}

/// Inverted dropout with masks drawn from a dedicated stream.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = tape.shape(x);
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let mask = (0..r * c)
            .map(|_| if self.rng.random_bool(self.rate) { T::zero() } else { keep })
            .collect();
        tape.mul_const(x, mask)
    }
}

fn maybe_dropout<T: Scalar>(dropout: &mut Option<Dropout>, tape: &mut Tape<'_, T>, x: Var) -> Var {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_block<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    store: &'p ParamStore<T>,
    p: &AttentionParams,
    queries_from: Var,
    keys_from: Var,
    bias: Option<Var>,
    layout: AttentionLayout,
) -> Var {
    let wq = store.var(tape, p.q);
    let wk = store.var(tape, p.k);
    let wv = store.var(tape, p.v);
    let wo = store.var(tape, p.o);
    let q = tape.matmul(queries_from, wq);
    let k = tape.matmul(keys_from, wk);
    let v = tape.matmul(keys_from, wv);
    let a = tape.attention(q, k, v, bias, layout);
    tape.matmul(a, wo)
}

fn feed_forward<'p, T: Scalar>(tape: &mut Tape<'p, T>, store: &'p ParamStore<T>, p: &FeedForwardParams, x: Var) -> Var {
    let wi = store.var(tape, p.wi);
    let wo = store.var(tape, p.wo);
    let h = tape.matmul(x, wi);
    let h = tape.gelu(h);
    tape.matmul(h, wo)
}

/// Runs the encoder stack over `batch` stacked sequences of fused patch
/// embeddings. `patch_mask` has one entry per row of `x`.
pub fn encode<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    store: &'p ParamStore<T>,
    params: &BackboneParams,
    cfg: &BackboneConfig,
    x: Var,
    batch: usize,
    patch_mask: &[bool],
    dropout: &mut Option<Dropout>,
) -> Var {
    let rows = tape.shape(x).0;
    let n = rows / batch;
    assert_eq!(patch_mask.len(), rows, "one patch-mask bit per row");
    let mut mask = Vec::with_capacity(batch * n * n);
    for b in 0..batch {
        let keys = &patch_mask[b * n..(b + 1) * n];
        for _ in 0..n {
            mask.extend_from_slice(keys);
        }
    }
    let layout = AttentionLayout {
        batch,
        q_len: n,
        k_len: n,
        heads: cfg.heads,
        mask: Arc::new(mask),
        buckets: Some(Arc::new(bucket_matrix(n, n, true, cfg.buckets, cfg.max_distance))),
    };
    let bias = store.var(tape, params.enc_bias);
    let mut x = x;
    for layer in &params.encoder {
        let w = store.var(tape, layer.attn_norm);
        let h = tape.rms_norm(x, w);
        let a = attention_block(tape, store, &layer.attn, h, h, Some(bias), layout.clone());
        let a = maybe_dropout(dropout, tape, a);
        x = tape.add(x, a);
        let w = store.var(tape, layer.ffn_norm);
        let h = tape.rms_norm(x, w);
        let f = feed_forward(tape, store, &layer.ffn, h);
        let f = maybe_dropout(dropout, tape, f);
        x = tape.add(x, f);
    }
    let w = store.var(tape, params.enc_norm);
    tape.rms_norm(x, w)
}

/// Runs the decoder stack over `batch` stacked token sequences, attending to
/// `memory` (`batch * mem_len` rows) wherever `memory_mask` is set.
#[allow(clippy::too_many_arguments)]
pub fn decode<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    store: &'p ParamStore<T>,
    params: &BackboneParams,
    cfg: &BackboneConfig,
    tokens: Var,
    batch: usize,
    memory: Var,
    memory_mask: &[bool],
    dropout: &mut Option<Dropout>,
) -> Var {
    let t_len = tape.shape(tokens).0 / batch;
    let m_rows = tape.shape(memory).0;
    let m_len = m_rows / batch;
    assert_eq!(memory_mask.len(), m_rows, "one memory-mask bit per row");

    let causal: Vec<bool> = (0..batch)
        .flat_map(|_| (0..t_len).flat_map(move |q| (0..t_len).map(move |k| k <= q)))
        .collect();
    let self_layout = AttentionLayout {
        batch,
        q_len: t_len,
        k_len: t_len,
        heads: cfg.heads,
        mask: Arc::new(causal),
        buckets: Some(Arc::new(bucket_matrix(t_len, t_len, false, cfg.buckets, cfg.max_distance))),
    };
    let mut cross = Vec::with_capacity(batch * t_len * m_len);
    for b in 0..batch {
        let keys = &memory_mask[b * m_len..(b + 1) * m_len];
        for _ in 0..t_len {
            cross.extend_from_slice(keys);
        }
    }
    let cross_layout = AttentionLayout {
        batch,
        q_len: t_len,
        k_len: m_len,
        heads: cfg.heads,
        mask: Arc::new(cross),
        buckets: None,
    };

    let bias = store.var(tape, params.dec_bias);
    let mut x = tokens;
    for layer in &params.decoder {
        let w = store.var(tape, layer.self_norm);
        let h = tape.rms_norm(x, w);
        let a = attention_block(tape, store, &layer.self_attn, h, h, Some(bias), self_layout.clone());
        let a = maybe_dropout(dropout, tape, a);
        x = tape.add(x, a);
        let w = store.var(tape, layer.cross_norm);
        let h = tape.rms_norm(x, w);
        let c = attention_block(tape, store, &layer.cross_attn, h, memory, None, cross_layout.clone());
        let c = maybe_dropout(dropout, tape, c);
        x = tape.add(x, c);
        let w = store.var(tape, layer.ffn_norm);
        let h = tape.rms_norm(x, w);
        let f = feed_forward(tape, store, &layer.ffn, h);
        let f = maybe_dropout(dropout, tape, f);
        x = tape.add(x, f);
    }
    let w = store.var(tape, params.dec_norm);
    tape.rms_norm(x, w)
}
