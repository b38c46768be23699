//! Multi-resolution patching and patch embedding.
//!
//! A context of `C` points is cut into non-overlapping patches at every
//! configured size `P_1 < ... < P_K`. Each resolution has its own residual
//! MLP projector that maps a patch concatenated with its point mask to a
//! `d`-vector. Coarse resolutions are then replicated up to the finest patch
//! count and all resolutions are summed position by position.
//!
//! The decoder reads future points in tokens of the output patch size `P_o`.
//! A token's embedding is, per resolution, the mean of the projected patches
//! inside its span, summed over resolutions. Using the coarsest stride keeps
//! every token a function of points at or before its end, so causal attention
//! over tokens never sees future values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Patch sizes for the encoder and the output patch size of the decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub sizes: Vec<usize>,
    pub output: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::Config("at least one patch size is required".into()));
        }
        for &p in self.sizes.iter().chain(std::iter::once(&self.output)) {
            if !p.is_power_of_two() {
                return Err(Error::Config(format!("patch size {p} is not a power of two")));
            }
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "patch sizes must be strictly increasing: {:?}",
                self.sizes
            )));
        }
        if self.output < self.coarsest() {
            return Err(Error::Config(format!(
                "output patch size {} is smaller than the coarsest patch size {}",
                self.output,
                self.coarsest()
            )));
        }
        Ok(())
    }

    pub fn finest(&self) -> usize {
        self.sizes[0]
    }

    pub fn coarsest(&self) -> usize {
        *self.sizes.last().expect("validated nonempty")
    }

    /// Checks that a context of `len` points splits evenly at every resolution.
    pub fn check_context(&self, len: usize) -> Result<()> {
        if len == 0 || !len.is_multiple_of(self.coarsest()) {
            return Err(Error::NotDivisible {
                len,
                divisor: self.coarsest(),
            });
        }
        Ok(())
    }
}

/// The patches of one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGroup<T> {
    pub size: usize,
    pub patches: Vec<Vec<T>>,
    pub masks: Vec<Vec<bool>>,
}

/// Cuts `seq` (and its mask) into `seq.len() / size` contiguous patches.
pub fn patch_divide<T: Copy>(seq: &[T], mask: &[bool], size: usize) -> Result<PatchGroup<T>> {
    if seq.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: seq.len(),
            actual: mask.len(),
        });
    }
    if size == 0 || !seq.len().is_multiple_of(size) {
        return Err(Error::NotDivisible {
            len: seq.len(),
            divisor: size,
        });
    }
    Ok(PatchGroup {
        size,
        patches: seq.chunks(size).map(<[T]>::to_vec).collect(),
        masks: mask.chunks(size).map(<[bool]>::to_vec).collect(),
    })
}

/// Zero-based source index for each of the `n_fine` output positions when a
/// group of `n_coarse` embeddings is replicated: position `j` (1-based) takes
/// source `ceil(j * n_coarse / n_fine)`.
pub fn upsample_indices(n_coarse: usize, n_fine: usize) -> Result<Vec<usize>> {
    if n_coarse == 0 || !n_fine.is_multiple_of(n_coarse) {
        return Err(Error::NotDivisible {
            len: n_fine,
            divisor: n_coarse,
        });
    }
    Ok((1..=n_fine).map(|j| (j * n_coarse).div_ceil(n_fine) - 1).collect())
}

pub fn upsample_group<T: Clone>(group: &[T], n_fine: usize) -> Result<Vec<T>> {
    Ok(upsample_indices(group.len(), n_fine)?
        .into_iter()
        .map(|i| group[i].clone())
        .collect())
}

/// Patch-level mask at the finest resolution: a patch is masked out only when
/// every point in it is padding.
pub fn patch_mask(point_mask: &[bool], finest: usize) -> Vec<bool> {
    point_mask.chunks(finest).map(|c| c.iter().any(|&m| m)).collect()
}

/// Fused embedding sequence at the finest patch resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding<T> {
    pub embeddings: Vec<Vec<T>>,
    pub patch_mask: Vec<bool>,
}

/// Sums already-upsampled groups position by position.
pub fn fuse_groups<T: Scalar>(groups: &[Vec<Vec<T>>], point_mask: &[bool], finest: usize) -> Result<FusedEmbedding<T>> {
    let first = groups
        .first()
        .ok_or_else(|| Error::InvalidInput("no groups to fuse".into()))?;
    let n = first.len();
    let pm = patch_mask(point_mask, finest);
    if pm.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: pm.len(),
        });
    }
    let mut out = first.clone();
    for g in &groups[1..] {
        if g.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: g.len(),
            });
        }
        for (o, e) in out.iter_mut().zip(g) {
            if o.len() != e.len() {
                return Err(Error::LengthMismatch {
                    expected: o.len(),
                    actual: e.len(),
                });
            }
            for (a, &b) in o.iter_mut().zip(e) {
                *a += b;
            }
        }
    }
    Ok(FusedEmbedding {
        embeddings: out,
        patch_mask: pm,
    })
}

/// One residual hidden layer: `h + W_down gelu(W_up h + b_up) + b_down`.
#[derive(Clone, Debug)]
pub struct ResidualLayer {
    pub w_up: ParamId,
    pub b_up: ParamId,
    pub w_down: ParamId,
    pub b_down: ParamId,
}

impl ResidualLayer {
    pub(crate) fn new<T: Scalar, R: rand::Rng>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        ResidualLayer {
            w_up: store.add(format!("{prefix}.w_up"), d, d, Init::Normal(std), rng),
            b_up: store.add(format!("{prefix}.b_up"), 1, d, Init::Zeros, rng),
            w_down: store.add(format!("{prefix}.w_down"), d, d, Init::Normal(std), rng),
            b_down: store.add(format!("{prefix}.b_down"), 1, d, Init::Zeros, rng),
        }
    }

    pub(crate) fn forward<'p, T: Scalar>(&self, tape: &mut Tape<'p, T>, store: &'p ParamStore<T>, h: Var) -> Var {
        let w_up = store.var(tape, self.w_up);
        let b_up = store.var(tape, self.b_up);
        let w_down = store.var(tape, self.w_down);
        let b_down = store.var(tape, self.b_down);
        let u = tape.matmul(h, w_up);
        let u = tape.add_row(u, b_up);
        let u = tape.gelu(u);
        let u = tape.matmul(u, w_down);
        let u = tape.add_row(u, b_down);
        tape.add(h, u)
    }
}

/// Per-resolution projector: an input layer from `2 * P_k` to `d` followed by
/// two residual hidden layers.
#[derive(Clone, Debug)]
pub struct ProjectorParams {
    pub size: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub hidden: [ResidualLayer; 2],
}

impl ProjectorParams {
    pub(crate) fn new<T: Scalar, R: rand::Rng>(store: &mut ParamStore<T>, k: usize, size: usize, d: usize, rng: &mut R) -> Self {
        let prefix = format!("proj.{k}");
        ProjectorParams {
            size,
            w_in: store.add(
                format!("{prefix}.w_in"),
                2 * size,
                d,
                Init::Normal(1.0 / ((2 * size) as f64).sqrt()),
                rng,
            ),
            b_in: store.add(format!("{prefix}.b_in"), 1, d, Init::Zeros, rng),
            hidden: [
                ResidualLayer::new(store, &format!("{prefix}.res0"), d, rng),
                ResidualLayer::new(store, &format!("{prefix}.res1"), d, rng),
            ],
        }
    }

    pub(crate) fn param_count(size: usize, d: usize) -> usize {
        2 * size * d + d + 2 * (2 * d * d + 2 * d)
    }

    /// Projects `rows x 2*size` patch-plus-mask rows to `rows x d`.
    pub fn forward<'p, T: Scalar>(&self, tape: &mut Tape<'p, T>, store: &'p ParamStore<T>, input: Var) -> Var {
        let w = store.var(tape, self.w_in);
        let b = store.var(tape, self.b_in);
        let h = tape.matmul(input, w);
        let mut h = tape.add_row(h, b);
        for layer in &self.hidden {
            h = layer.forward(tape, store, h);
        }
        h
    }
}

/// Rows of `[patch values, mask bits]` for every patch of `values`.
pub(crate) fn projector_rows<T: Scalar>(values: &[T], mask: &[bool], size: usize, out: &mut Vec<T>) {
    for (p, m) in values.chunks(size).zip(mask.chunks(size)) {
        out.extend_from_slice(p);
        out.extend(m.iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
}

/// Learnable pieces of the input stage.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub projectors: Vec<ProjectorParams>,
    pub start_token: ParamId,
}

impl EmbedParams {
    pub(crate) fn new<T: Scalar, R: rand::Rng>(store: &mut ParamStore<T>, cfg: &PatchConfig, d: usize, rng: &mut R) -> Self {
        let projectors = cfg
            .sizes
            .iter()
            .enumerate()
            .map(|(k, &p)| ProjectorParams::new(store, k, p, d, rng))
            .collect();
        let start_token = store.add("decoder.start", 1, d, Init::Normal(1.0), rng);
        EmbedParams {
            projectors,
            start_token,
        }
    }

    /// Embeds a batch of equal-length contexts. Returns the fused
    /// `batch*N_1 x d` sequence and the concatenated patch masks.
    pub fn embed_context<'p, T: Scalar>(
        &self,
        tape: &mut Tape<'p, T>,
        store: &'p ParamStore<T>,
        contexts: &[&[T]],
        masks: &[&[bool]],
    ) -> (Var, Vec<bool>) {
        let batch = contexts.len();
        let len = contexts[0].len();
        let finest = self.projectors[0].size;
        let n_fine = len / finest;
        let mut fused: Option<Var> = None;
        for proj in &self.projectors {
            let n_k = len / proj.size;
            let mut rows = Vec::with_capacity(batch * len * 2);
            for (c, m) in contexts.iter().zip(masks) {
                projector_rows(c, m, proj.size, &mut rows);
            }
            let input = tape.input(rows, batch * n_k, 2 * proj.size);
            let z = proj.forward(tape, store, input);
            let z = if n_k == n_fine {
                z
            } else {
                let local = upsample_indices(n_k, n_fine).expect("validated divisibility");
                let index = (0..batch).flat_map(|b| local.iter().map(move |&i| b * n_k + i)).collect();
                tape.gather_rows(z, index)
            };
            fused = Some(match fused {
                None => z,
                Some(acc) => tape.add(acc, z),
            });
        }
        let pm = masks.iter().flat_map(|m| patch_mask(m, finest)).collect();
        (fused.expect("at least one resolution"), pm)
    }

    /// Embeds decoder inputs: a start token followed by one token per output
    /// patch of each prefix. Returns a `batch*(1 + prefix_len/P_o) x d` matrix.
    pub fn embed_decoder<'p, T: Scalar>(
        &self,
        tape: &mut Tape<'p, T>,
        store: &'p ParamStore<T>,
        output_patch: usize,
        prefixes: &[&[T]],
        masks: &[&[bool]],
    ) -> Var {
        let batch = prefixes.len();
        let len = prefixes[0].len();
        let start = store.var(tape, self.start_token);
        let steps = len / output_patch;
        if steps == 0 {
            return tape.gather_rows(start, vec![0; batch]);
        }
        let mut tokens: Option<Var> = None;
        for proj in &self.projectors {
            let mut rows = Vec::with_capacity(batch * len * 2);
            for (p, m) in prefixes.iter().zip(masks) {
                projector_rows(p, m, proj.size, &mut rows);
            }
            let n_k = len / proj.size;
            let input = tape.input(rows, batch * n_k, 2 * proj.size);
            let z = proj.forward(tape, store, input);
            let z = if proj.size == output_patch {
                z
            } else {
                tape.mean_row_groups(z, output_patch / proj.size)
            };
            tokens = Some(match tokens {
                None => z,
                Some(acc) => tape.add(acc, z),
            });
        }
        let body = tokens.expect("at least one resolution");
        let all = tape.concat_rows(&[start, body]);
        let index = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..steps).map(move |t| 1 + b * steps + t)))
            .collect();
        tape.gather_rows(all, index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn divide_examples() {
        let x: Vec<f64> = (1..=8).map(f64::from).collect();
        let g = patch_divide(&x, &[true; 8], 4).unwrap();
        assert_eq!(g.patches, vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        let long = vec![0.0; 512];
        let m = vec![true; 512];
        assert_eq!(patch_divide(&long, &m, 16).unwrap().patches.len(), 32);
        assert_eq!(patch_divide(&long, &m, 32).unwrap().patches.len(), 16);
        assert!(matches!(patch_divide(&x, &[true; 8], 3), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(upsample_indices(2, 4).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(upsample_indices(4, 4).unwrap(), vec![0, 1, 2, 3]);
        let idx = upsample_indices(16, 32).unwrap();
        for (j, &i) in idx.iter().enumerate() {
            assert_eq!(i, j / 2);
        }
        assert!(upsample_indices(3, 4).is_err());
    }

    #[test]
    fn fuse_examples() {
        let a = vec![vec![1.0f64, 2.0], vec![3.0, 4.0]];
        let zeros = vec![vec![0.0f64; 2]; 2];
        let mask = [true; 4];
        let single = fuse_groups(std::slice::from_ref(&a), &mask, 2).unwrap();
        assert_eq!(single.embeddings, a);
        let with_zero = fuse_groups(&[a.clone(), zeros], &mask, 2).unwrap();
        assert_eq!(with_zero.embeddings, a);
        assert!(fuse_groups(&[a.clone(), vec![vec![0.0; 2]; 3]], &mask, 2).is_err());

        let mut pm = vec![false; 16];
        pm.extend(vec![true; 496]);
        let p = patch_mask(&pm, 16);
        assert_eq!(p.len(), 32);
        assert!(!p[0]);
        assert!(p[1..].iter().all(|&b| b));
    }

    #[test]
    fn config_validation() {
        let ok = PatchConfig {
            sizes: vec![16, 32],
            output: 32,
        };
        ok.validate().unwrap();
        ok.check_context(512).unwrap();
        assert!(ok.check_context(500).is_err());
        assert!(PatchConfig { sizes: vec![12], output: 32 }.validate().is_err());
        assert!(PatchConfig { sizes: vec![32, 16], output: 32 }.validate().is_err());
        assert!(PatchConfig { sizes: vec![16, 32], output: 16 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn partition_reassembles_input(exp in 0u32..4, n in 1usize..8, seed in any::<u64>()) {
            let size = 1usize << exp;
            let len = size * n;
            let x: Vec<f64> = (0..len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
            let mask: Vec<bool> = (0..len).map(|i| i % 3 != 0).collect();
            let g = patch_divide(&x, &mask, size).unwrap();
            prop_assert_eq!(g.patches.concat(), x);
            prop_assert_eq!(g.masks.concat(), mask);
        }

        #[test]
        fn replication_counts(ek in 0u32..5, extra in 0u32..4) {
            let n_coarse = 1usize << ek;
            let n_fine = n_coarse << extra;
            let idx = upsample_indices(n_coarse, n_fine).unwrap();
            let reps = n_fine / n_coarse;
            for src in 0..n_coarse {
                let pos: Vec<usize> = idx.iter().enumerate().filter(|(_, &i)| i == src).map(|(j, _)| j).collect();
                prop_assert_eq!(pos.len(), reps);
                prop_assert!(pos.windows(2).all(|w| w[1] == w[0] + 1));
            }
        }

        #[test]
        fn fusion_is_linear(vals in proptest::collection::vec(-5.0f64..5.0, 24)) {
            let to_groups = |v: &[f64]| -> Vec<Vec<Vec<f64>>> {
                v.chunks(12).map(|g| g.chunks(3).map(<[f64]>::to_vec).collect()).collect()
            };
            let a = to_groups(&vals);
            let b = to_groups(&vals.iter().map(|x| x * 0.5 - 1.0).collect::<Vec<_>>());
            let sum: Vec<Vec<Vec<f64>>> = a.iter().zip(&b).map(|(ga, gb)| {
                ga.iter().zip(gb).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect()).collect()
            }).collect();
            let mask = vec![true; 8];
            let fa = fuse_groups(&a, &mask, 2).unwrap().embeddings;
            let fb = fuse_groups(&b, &mask, 2).unwrap().embeddings;
            let fs = fuse_groups(&sum, &mask, 2).unwrap().embeddings;
            for ((x, y), s) in fa.iter().flatten().zip(fb.iter().flatten()).zip(fs.iter().flatten()) {
                prop_assert!((x + y - s).abs() < 1e-12);
            }
        }

        #[test]
        fn patch_mask_rule(bits in proptest::collection::vec(any::<bool>(), 32)) {
            let pm = patch_mask(&bits, 4);
            for (j, &p) in pm.iter().enumerate() {
                prop_assert_eq!(!p, bits[j * 4..(j + 1) * 4].iter().all(|&b| !b));
            }
        }
    }
}
