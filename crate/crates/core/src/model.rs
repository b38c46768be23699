//! The full forecaster: multi-resolution patch embedding, encoder-decoder
//! backbone and output head over one parameter store.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneParams, Dropout};
use crate::error::{Error, Result};
use crate::head::{HeadParams, PatchPrediction, QuantileSet};
use crate::params::ParamStore;
use crate::patch::{EmbedParams, PatchConfig, ProjectorParams};
use crate::scalar::Scalar;
use crate::seed::sub_rng;
use crate::tape::{Tape, Var};

fn default_buckets() -> usize {
    32
}

fn default_max_distance() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_sizes: Vec<usize>,
    pub output_patch: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    #[serde(default = "default_max_distance")]
    pub max_distance: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub quantiles: QuantileSet,
}

impl ModelConfig {
    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            sizes: self.patch_sizes.clone(),
            output: self.output_patch,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            d_model: self.d_model,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            d_ff: self.d_ff,
            buckets: self.buckets,
            max_distance: self.max_distance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pc = self.patch_config();
        pc.validate()?;
        pc.check_context(self.context_len)?;
        self.backbone_config().validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Output head width `P_o * (Q + 1)`.
    pub fn head_width(&self) -> usize {
        self.output_patch * (self.quantiles.len() + 1)
    }

    /// Closed-form count of every learnable scalar implied by the config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let projectors: usize = self.patch_sizes.iter().map(|&p| ProjectorParams::param_count(p, d)).sum();
        projectors + d + BackboneParams::param_count(&self.backbone_config())
            + HeadParams::param_count(d, self.output_patch, self.quantiles.len())
    }
}

/// Encoder output for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory<T> {
    /// `N_1 x d`, row-major.
    pub values: Vec<T>,
    pub patch_mask: Vec<bool>,
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    embed: EmbedParams,
    backbone: BackboneParams,
    head: HeadParams,
    encodes: AtomicUsize,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            store: self.store.clone(),
            embed: self.embed.clone(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            encodes: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.store.total())
            .finish()
    }
}

impl<T: Scalar> Model<T> {
    fn build(config: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamStore<T>, EmbedParams, BackboneParams, HeadParams) {
        let mut store = ParamStore::default();
        let embed = EmbedParams::new(&mut store, &config.patch_config(), config.d_model, rng);
        let backbone = BackboneParams::new(&mut store, &config.backbone_config(), rng);
        let head = HeadParams::new(&mut store, config.d_model, config.output_patch, config.quantiles.len(), rng);
        (store, embed, backbone, head)
    }

    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = sub_rng(seed, "init");
        let (store, embed, backbone, head) = Self::build(&config, &mut rng);
        Ok(Model {
            config,
            store,
            embed,
            backbone,
            head,
            encodes: AtomicUsize::new(0),
        })
    }

    /// Adopts externally supplied parameters, which must match the layout
    /// implied by `config` array for array.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (layout, embed, backbone, head) = Self::build(&config, &mut rng);
        if layout.len() != store.len() {
            return Err(Error::CheckpointMismatch {
                field: "parameter count".into(),
                detail: format!("config implies {} arrays, found {}", layout.len(), store.len()),
            });
        }
        for (want, got) in layout.specs().iter().zip(store.specs()) {
            if want != got {
                return Err(Error::CheckpointMismatch {
                    field: want.name.clone(),
                    detail: format!(
                        "expected {} [{}x{}], found {} [{}x{}]",
                        want.name, want.rows, want.cols, got.name, got.rows, got.cols
                    ),
                });
            }
        }
        Ok(Model {
            config,
            store,
            embed,
            backbone,
            head,
            encodes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn embed_params(&self) -> &EmbedParams {
        &self.embed
    }

    pub fn backbone_params(&self) -> &BackboneParams {
        &self.backbone
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.head
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            embed: self.embed.clone(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            encodes: AtomicUsize::new(0),
        }
    }

    /// How many times [`Model::encode`] has run on this instance.
    pub fn encode_count(&self) -> usize {
        self.encodes.load(Ordering::Relaxed)
    }

    /// Teacher-forced forward pass over a batch. Every context has length
    /// `context_len`; every prefix has the same length, a multiple of `P_o`.
    /// Returns head outputs of shape `batch * (1 + prefix_len / P_o) x width`.
    pub fn forward_batch<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        contexts: &[&[T]],
        masks: &[&[bool]],
        prefixes: &[&[T]],
        dropout: &mut Option<Dropout>,
    ) -> Var {
        let batch = contexts.len();
        let bb = self.config.backbone_config();
        let (fused, pm) = self.embed.embed_context(tape, &self.store, contexts, masks);
        let memory = backbone::encode(tape, &self.store, &self.backbone, &bb, fused, batch, &pm, dropout);
        let prefix_masks: Vec<Vec<bool>> = prefixes.iter().map(|p| vec![true; p.len()]).collect();
        let prefix_masks: Vec<&[bool]> = prefix_masks.iter().map(Vec::as_slice).collect();
        let tokens = self
            .embed
            .embed_decoder(tape, &self.store, self.config.output_patch, prefixes, &prefix_masks);
        let out = backbone::decode(tape, &self.store, &self.backbone, &bb, tokens, batch, memory, &pm, dropout);
        self.head.forward(tape, &self.store, out)
    }

    /// Projects one patch and its point mask with the projector of resolution `k`.
    pub fn project_patch(&self, patch: &[T], mask: &[bool], k: usize) -> Vec<T> {
        let proj = &self.embed.projectors[k];
        assert_eq!(patch.len(), proj.size, "patch length");
        let mut rows = Vec::with_capacity(2 * proj.size);
        crate::patch::projector_rows(patch, mask, proj.size, &mut rows);
        let mut tape = Tape::new();
        let x = tape.input(rows, 1, 2 * proj.size);
        let y = proj.forward(&mut tape, &self.store, x);
        tape.value(y).to_vec()
    }

    /// Decoder input tokens for a future prefix, `(1 + len / P_o) x d`.
    pub fn embed_decoder_tokens(&self, prefix: &[T], mask: &[bool]) -> Vec<T> {
        let mut tape = Tape::new();
        let v = self
            .embed
            .embed_decoder(&mut tape, &self.store, self.config.output_patch, &[prefix], &[mask]);
        tape.value(v).to_vec()
    }

    /// Fused multi-resolution embedding of a context, `N_1 x d`, with its patch mask.
    pub fn embed_context(&self, context: &[T], mask: &[bool]) -> (Vec<T>, Vec<bool>) {
        let mut tape = Tape::new();
        let (v, pm) = self.embed.embed_context(&mut tape, &self.store, &[context], &[mask]);
        (tape.value(v).to_vec(), pm)
    }

    /// Runs the encoder stack over precomputed fused embeddings.
    pub fn encode_embeddings(&self, fused: &[T], patch_mask: &[bool]) -> Vec<T> {
        let d = self.config.d_model;
        let mut tape = Tape::new();
        let x = tape.input(fused.to_vec(), fused.len() / d, d);
        let bb = self.config.backbone_config();
        let m = backbone::encode(&mut tape, &self.store, &self.backbone, &bb, x, 1, patch_mask, &mut None);
        tape.value(m).to_vec()
    }

    /// Encodes a scaled, padded context of length `context_len`.
    pub fn encode(&self, context: &[T], mask: &[bool]) -> Memory<T> {
        self.encodes.fetch_add(1, Ordering::Relaxed);
        let (fused, patch_mask) = self.embed_context(context, mask);
        Memory {
            values: self.encode_embeddings(&fused, &patch_mask),
            patch_mask,
        }
    }

    /// Decoder outputs `o_1..o_T` (`T x d`) for explicit token embeddings.
    pub fn decode_tokens(&self, tokens: &[T], memory: &Memory<T>) -> Vec<T> {
        let mut tape = Tape::new();
        let out = self.decode_on_tape(&mut tape, tokens, memory);
        tape.value(out).to_vec()
    }

    fn decode_on_tape<'p>(&'p self, tape: &mut Tape<'p, T>, tokens: &[T], memory: &Memory<T>) -> Var {
        let d = self.config.d_model;
        let t = tape.input(tokens.to_vec(), tokens.len() / d, d);
        let m = tape.input(memory.values.clone(), memory.values.len() / d, d);
        let bb = self.config.backbone_config();
        backbone::decode(tape, &self.store, &self.backbone, &bb, t, 1, m, &memory.patch_mask, &mut None)
    }

    /// Decoder outputs for a future prefix (a multiple of `P_o` points long).
    pub fn decode(&self, memory: &Memory<T>, prefix: &[T]) -> Vec<T> {
        let tokens = self.embed_decoder_tokens(prefix, &vec![true; prefix.len()]);
        self.decode_tokens(&tokens, memory)
    }

    /// Maps one decoder output vector to its patch prediction.
    pub fn predict_patch(&self, o: &[T]) -> PatchPrediction<T> {
        let d = self.config.d_model;
        assert_eq!(o.len(), d, "decoder output width");
        let mut tape = Tape::new();
        let x = tape.input(o.to_vec(), 1, d);
        let y = self.head.forward(&mut tape, &self.store, x);
        PatchPrediction::from_flat(tape.value(y), self.config.output_patch, self.config.quantiles.len())
    }

    /// Patch predictions at every decoder position for a future prefix.
    pub fn predict_all(&self, memory: &Memory<T>, prefix: &[T]) -> Vec<PatchPrediction<T>> {
        let tokens = self.embed_decoder_tokens(prefix, &vec![true; prefix.len()]);
        let mut tape = Tape::new();
        let out = self.decode_on_tape(&mut tape, &tokens, memory);
        let y = self.head.forward(&mut tape, &self.store, out);
        let width = self.config.head_width();
        tape.value(y)
            .chunks(width)
            .map(|row| PatchPrediction::from_flat(row, self.config.output_patch, self.config.quantiles.len()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            patch_sizes: vec![2, 4],
            output_patch: 4,
            context_len: 16,
            d_model: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_ff: 64,
            buckets: 8,
            max_distance: 16,
            dropout: 0.0,
            quantiles: QuantileSet::new(vec![0.1, 0.5, 0.9]).unwrap(),
        }
    }

    #[test]
    fn analytic_count_matches_store() {
        let cfg = tiny();
        let m = Model::<f64>::init(cfg.clone(), 1).unwrap();
        assert_eq!(m.store().total(), cfg.param_count());
        let mut wide = cfg.clone();
        wide.d_ff *= 2;
        let delta = wide.param_count() - cfg.param_count();
        let ffn_layers = cfg.enc_layers + cfg.dec_layers;
        assert_eq!(delta, ffn_layers * 2 * cfg.d_model * cfg.d_ff);
        assert_eq!(Model::<f64>::init(wide.clone(), 1).unwrap().store().total(), wide.param_count());
    }

    #[test]
    fn from_store_rejects_other_layouts() {
        let m = Model::<f32>::init(tiny(), 3).unwrap();
        let mut other = tiny();
        other.d_model = 32;
        other.d_ff = 128;
        let err = Model::from_store(other, m.store().clone()).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch { .. }), "{err}");
        assert!(Model::from_store(tiny(), m.store().clone()).is_ok());
    }

    #[test]
    fn shapes_through_the_pipeline() {
        let cfg = tiny();
        let m = Model::<f64>::init(cfg.clone(), 5).unwrap();
        let ctx: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let mem = m.encode(&ctx, &[true; 16]);
        assert_eq!(mem.values.len(), 8 * 16);
        assert_eq!(m.encode_count(), 1);
        let out = m.decode(&mem, &[]);
        assert_eq!(out.len(), 16);
        let out = m.decode(&mem, &[0.5; 8]);
        assert_eq!(out.len(), 3 * 16);
        let p = m.predict_patch(&out[..16]);
        assert_eq!(p.point.len(), 4);
        let all = m.predict_all(&mem, &[0.5; 8]);
        assert_eq!(all.len(), 3);
        assert_eq!(all[0], p);
        assert_eq!(m.project_patch(&[1.0, 2.0], &[true, true], 0).len(), 16);
        assert_eq!(m.project_patch(&[1.0; 4], &[true; 4], 1).len(), 16);
    }

    #[test]
    fn zero_projectors_give_zero_embedding() {
        let mut m = Model::<f64>::init(tiny(), 2).unwrap();
        let ids: Vec<_> = m.store().ids().filter(|&id| m.store().spec(id).name.starts_with("proj.")).collect();
        for id in ids {
            m.store_mut().get_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(m.project_patch(&[3.0, -1.0], &[true, false], 0).iter().all(|&v| v == 0.0));
    }
}
