//! Fourier-feature coordinate embeddings.
//!
//! Mode `k` maps a scalar coordinate `x` to
//! `MLP([cos(2 pi phi_k x), sin(2 pi phi_k x)])` in `R^{R_k}`; a full
//! coordinate is embedded as the concatenation of its mode outputs.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffarray::{Array, ParamId, ParamStore, Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Activation, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Per-mode ranks `R_k`; the number of modes is `ranks.len()`.
    pub ranks: Vec<usize>,
    /// Frequencies per mode.
    #[serde(default = "default_frequencies")]
    pub frequencies: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
}

fn default_frequencies() -> usize {
    16
}
fn default_hidden() -> usize {
    64
}
fn default_hidden_layers() -> usize {
    2
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self::new(vec![16, 16])
    }
}

impl EmbeddingConfig {
    pub fn new(ranks: Vec<usize>) -> Self {
        Self {
            ranks,
            frequencies: default_frequencies(),
            hidden: default_hidden(),
            hidden_layers: default_hidden_layers(),
        }
    }

    pub fn total_rank(&self) -> usize {
        self.ranks.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(invalid(format!("ranks must be non-empty and positive, got {:?}", self.ranks)));
        }
        if self.frequencies == 0 || self.hidden == 0 {
            return Err(invalid("frequencies and hidden width must be positive"));
        }
        Ok(())
    }
}

/// Log-spaced magnitudes in `[1, f]`.
pub fn initial_frequencies(f: usize) -> Vec<f64> {
    if f == 1 {
        return vec![1.0];
    }
    (0..f)
        .map(|j| (f as f64).powf(j as f64 / (f - 1) as f64))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ModeEmbedder {
    pub mode: usize,
    pub rank: usize,
    pub phi: ParamId,
    pub mlp: Mlp,
}

impl ModeEmbedder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        mode: usize,
        rank: usize,
        cfg: &EmbeddingConfig,
    ) -> Result<Self> {
        let f = cfg.frequencies;
        let phi = store.add(format!("{prefix}.phi"), Array::row(initial_frequencies(f)))?;
        let mut dims = vec![2 * f];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.hidden_layers));
        dims.push(rank);
        let mlp = Mlp::new(store, rng, &format!("{prefix}.mlp"), &dims, Activation::Sine)?;
        Ok(Self {
            mode,
            rank,
            phi,
            mlp,
        })
    }

    /// `[N, 1]` coordinates to `[N, 2F]` features (cosines then sines).
    pub fn features(&self, tape: &mut Tape, store: &ParamStore, coords: Var) -> Result<Var> {
        let phi = tape.param(store, self.phi);
        let arg = tape.matmul(coords, phi)?;
        let arg = tape.scale(arg, 2.0 * PI);
        let c = tape.cos(arg);
        let s = tape.sin(arg);
        tape.concat_cols(&[c, s])
    }

    /// `[N, 1]` coordinates to `[N, R_k]` embeddings.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, coords: Var) -> Result<Var> {
        let feats = self.features(tape, store, coords)?;
        self.mlp.forward(tape, store, feats)
    }

    /// Embedding of a single coordinate value.
    pub fn embed(&self, store: &ParamStore, x: f64) -> Result<Vec<f64>> {
        if !x.is_finite() {
            return Err(invalid(format!("non-finite coordinate {x} for mode {}", self.mode)));
        }
        let mut tape = Tape::new();
        let c = tape.constant(Array::column(vec![x]));
        let out = self.forward(&mut tape, store, c)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// The full set of mode embedders, producing `u_n in R^S`, `S = sum R_k`.
#[derive(Clone, Debug)]
pub struct CoordinateEmbedding {
    pub modes: Vec<ModeEmbedder>,
}

/// Distinct values of one coordinate column and, for every row, the index of
/// its value in that list.
fn dedupe(values: impl Iterator<Item = f64>) -> (Vec<f64>, Vec<usize>) {
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut uniq = Vec::new();
    let idx = values
        .map(|v| {
            let v = if v == 0.0 { 0.0 } else { v };
            *seen.entry(v.to_bits()).or_insert_with(|| {
                uniq.push(v);
                uniq.len() - 1
            })
        })
        .collect();
    (uniq, idx)
}

impl CoordinateEmbedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &EmbeddingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let modes = cfg
            .ranks
            .iter()
            .enumerate()
            .map(|(k, &r)| ModeEmbedder::new(store, rng, &format!("{prefix}.mode{k}"), k, r, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { modes })
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.modes.iter().map(|m| m.rank).sum()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.rank).collect()
    }

    fn check_coords(&self, coords: &Array) -> Result<()> {
        let (_, k) = coords.dims2();
        if k != self.num_modes() || coords.ndim() != 2 {
            return Err(invalid(format!(
                "coordinates must be N x {}, got {:?}",
                self.num_modes(),
                coords.shape()
            )));
        }
        if let Some(x) = coords.data().iter().find(|x| !x.is_finite()) {
            return Err(invalid(format!("non-finite coordinate {x}")));
        }
        Ok(())
    }

    /// Per-mode embeddings of an `N x K` coordinate batch, each `[N, R_k]`.
    ///
    /// Each mode network runs once per distinct coordinate value, so grid-aligned
    /// batches cost at most one evaluation per grid line.
    pub fn embed_modes(&self, tape: &mut Tape, store: &ParamStore, coords: &Array) -> Result<Vec<Var>> {
        self.check_coords(coords)?;
        let (n, k) = coords.dims2();
        self.modes
            .iter()
            .enumerate()
            .map(|(m, emb)| {
                let (uniq, idx) = dedupe((0..n).map(|i| coords.data()[i * k + m]));
                let table_in = tape.constant(Array::column(uniq));
                let table = emb.forward(tape, store, table_in)?;
                tape.gather_rows(table, &idx)
            })
            .collect()
    }

    /// `N x K` coordinates to the `N x S` matrix of concatenated embeddings.
    pub fn embed_batch(&self, tape: &mut Tape, store: &ParamStore, coords: &Array) -> Result<Var> {
        let parts = self.embed_modes(tape, store, coords)?;
        tape.concat_cols(&parts)
    }

    /// Embedding of one coordinate `(i_1, .., i_K)`.
    pub fn embed_coordinate(&self, store: &ParamStore, coord: &[f64]) -> Result<Vec<f64>> {
        if coord.len() != self.num_modes() {
            return Err(invalid(format!(
                "expected {} coordinate components, got {}",
                self.num_modes(),
                coord.len()
            )));
        }
        let mut tape = Tape::new();
        let u = self.embed_batch(&mut tape, store, &Array::row(coord.to_vec()))?;
        Ok(tape.value(u).data().to_vec())
    }

    /// Evaluates the embedding without recording gradients of interest.
    pub fn embed_array(&self, store: &ParamStore, coords: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let u = self.embed_batch(&mut tape, store, coords)?;
        Ok(tape.value(u).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffarray::finite_diff_check;
    use crate::rng::SeedStream;
    use rand::Rng;

    fn small(ranks: Vec<usize>) -> (ParamStore, CoordinateEmbedding) {
        let cfg = EmbeddingConfig {
            ranks,
            frequencies: 3,
            hidden: 5,
            hidden_layers: 2,
        };
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(1).rng();
        let e = CoordinateEmbedding::new(&mut store, &mut rng, "emb", &cfg).unwrap();
        (store, e)
    }

    #[test]
    fn initial_frequencies_are_log_spaced() {
        let f = initial_frequencies(16);
        assert_eq!(f.len(), 16);
        assert!((f[0] - 1.0).abs() < 1e-15 && (f[15] - 16.0).abs() < 1e-12);
        let ratios: Vec<f64> = f.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-12));
        assert_eq!(initial_frequencies(1), vec![1.0]);
    }

    #[test]
    fn zero_frequencies_make_the_embedding_constant() {
        let (mut store, e) = small(vec![3]);
        let phi = e.modes[0].phi;
        *store.get_mut(phi) = Array::row(vec![0.0; 3]);
        let a = e.modes[0].embed(&store, 0.1).unwrap();
        let b = e.modes[0].embed(&store, 0.77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn features_at_origin_are_ones_then_zeros() {
        let (store, e) = small(vec![2]);
        let mut t = Tape::new();
        let c = t.constant(Array::column(vec![0.0]));
        let f = e.modes[0].features(&mut t, &store, c).unwrap();
        assert_eq!(t.value(f).data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn quarter_period_feature_and_mlp_output() {
        let cfg = EmbeddingConfig {
            ranks: vec![2],
            frequencies: 1,
            hidden: 4,
            hidden_layers: 2,
        };
        let mut store = ParamStore::new();
        let e = CoordinateEmbedding::new(&mut store, &mut SeedStream::new(5).rng(), "e", &cfg).unwrap();
        let mode = &e.modes[0];
        let mut t = Tape::new();
        let c = t.constant(Array::column(vec![0.25]));
        let fv = mode.features(&mut t, &store, c).unwrap();
        let f = t.value(fv).clone();
        assert!(f.data()[0].abs() < 1e-15 && (f.data()[1] - 1.0).abs() < 1e-15);

        // direct evaluation of the MLP on [0, 1]
        let mut h = vec![0.0, 1.0];
        for (li, layer) in mode.mlp.layers.iter().enumerate() {
            let w = store.get(layer.w);
            let b = store.get(layer.b);
            let mut out = b.data().to_vec();
            for (i, hi) in h.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += hi * w.get2(i, j);
                }
            }
            if li + 1 < mode.mlp.layers.len() {
                out.iter_mut().for_each(|x| *x = x.sin());
            }
            h = out;
        }
        let got = mode.embed(&store, 0.25).unwrap();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_embedding_is_concatenation() {
        let (store, e) = small(vec![2, 3]);
        let u = e.embed_coordinate(&store, &[0.3, 0.9]).unwrap();
        assert_eq!(u.len(), 5);
        assert_eq!(&u[..2], e.modes[0].embed(&store, 0.3).unwrap().as_slice());
        assert_eq!(&u[2..], e.modes[1].embed(&store, 0.9).unwrap().as_slice());
        assert_eq!(u, e.embed_coordinate(&store, &[0.3, 0.9]).unwrap());
    }

    #[test]
    fn wrong_component_count_and_non_finite_rejected() {
        let (store, e) = small(vec![2, 3]);
        assert!(e.embed_coordinate(&store, &[0.3]).is_err());
        assert!(e.embed_coordinate(&store, &[0.3, f64::NAN]).is_err());
        assert!(e.modes[0].embed(&store, f64::INFINITY).is_err());
    }

    #[test]
    fn batch_rows_match_single_embeddings() {
        let (store, e) = small(vec![2, 3]);
        let coords = Array::from_rows(&[vec![0.1, 0.2], vec![0.5, 0.2], vec![0.1, 0.9]]).unwrap();
        let batch = e.embed_array(&store, &coords).unwrap();
        for i in 0..3 {
            let single = e.embed_coordinate(&store, coords.row_slice(i)).unwrap();
            assert_eq!(batch.row_slice(i), single.as_slice());
        }
    }

    #[test]
    fn perturbing_one_coordinate_touches_only_its_slice() {
        let (store, e) = small(vec![2, 3]);
        let a = e.embed_coordinate(&store, &[0.4, 0.6]).unwrap();
        let b = e.embed_coordinate(&store, &[0.4, 0.6 + 1e-3]).unwrap();
        assert_eq!(&a[..2], &b[..2]);
        assert_ne!(&a[2..], &b[2..]);
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let (store, e) = small(vec![2, 3]);
        let coords = Array::from_rows(&[vec![0.1, 0.7], vec![0.45, 0.3], vec![0.9, 0.7]]).unwrap();
        let mut rng = SeedStream::new(9).rng();
        let weights = Array::new(vec![3, 5], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let r = finite_diff_check(&store, 1e-6, |t, s| {
            let u = e.embed_batch(t, s, &coords)?;
            let w = t.constant(weights.clone());
            let p = t.mul(u, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
