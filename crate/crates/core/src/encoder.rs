//! Learned-query cross-attention over a variable-size observation set.
//!
//! Each observation contributes one row `D_t[n] = Linear([y_n; u_n])`. A single
//! learned query attends over the rows:
//!
//! ```text
//! a   = softmax(q^T K_t^T / sqrt(D)),  K_t = D_t W_K
//! out = a V_t,                         V_t = D_t W_V
//! z_t = MLP(out)
//! ```
//!
//! With `H > 1` heads the query and the columns of `W_K`, `W_V` are split into
//! `d_h = D / H` slices, each head uses scale `sqrt(d_h)`, and the concatenated
//! head outputs pass through `W_O`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffarray::{Array, ParamId, ParamStore, Tape, Var};
use crate::embedding::CoordinateEmbedding;
use crate::error::{invalid, Error, Result};
use crate::nn::{Activation, Linear, Mlp};

/// Observations of one frame: `N x K` coordinates and `N` values at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub t: f64,
    pub coords: Array,
    pub values: Vec<f64>,
}

impl ObservationSet {
    pub fn new(t: f64, coords: Array, values: Vec<f64>) -> Result<Self> {
        if coords.ndim() != 2 || coords.rows() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "observation_set",
                lhs: coords.shape().to_vec(),
                rhs: vec![values.len()],
            });
        }
        if !t.is_finite() {
            return Err(invalid(format!("non-finite timestamp {t}")));
        }
        Ok(Self { t, coords, values })
    }

    /// Builds a set from per-observation coordinate rows.
    pub fn from_points(t: f64, coords: &[Vec<f64>], values: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(invalid("an observation set needs at least one observation"));
        }
        Self::new(t, Array::from_rows(coords)?, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.coords.cols()
    }

    pub fn coord(&self, n: usize) -> &[f64] {
        self.coords.row_slice(n)
    }

    /// Observations at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let k = self.dims();
        let mut coords = Vec::with_capacity(idx.len() * k);
        let mut values = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(invalid(format!("observation index {i} out of range for {}", self.len())));
            }
            coords.extend_from_slice(self.coord(i));
            values.push(self.values[i]);
        }
        Self::new(self.t, Array::new(vec![idx.len(), k], coords)?, values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub latent: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub activation: Activation,
    pub layer_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 4,
            latent: 64,
            mlp_hidden: 512,
            mlp_layers: 1,
            activation: Activation::Gelu,
            layer_norm: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.latent == 0 || self.heads == 0 {
            return Err(invalid("encoder widths and head count must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.mlp_layers > 0 && self.mlp_hidden == 0 {
            return Err(invalid("encoder MLP hidden width must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub query: ParamId,
    pub input: Linear,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: Option<ParamId>,
    pub mlp: Mlp,
    pub heads: usize,
    pub d_model: usize,
    pub layer_norm: bool,
}

impl Encoder {
    /// `embed_dim` is `S`, the width of the coordinate embedding.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        embed_dim: usize,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let query = store.add_uniform(format!("{prefix}.q"), &[1, d], 1.0, rng)?;
        let input = Linear::new(store, rng, &format!("{prefix}.in"), 1 + embed_dim, d)?;
        let w_k = store.add_uniform(format!("{prefix}.w_k"), &[d, d], bound, rng)?;
        let w_v = store.add_uniform(format!("{prefix}.w_v"), &[d, d], bound, rng)?;
        let w_o = if cfg.heads > 1 {
            Some(store.add_uniform(format!("{prefix}.w_o"), &[d, d], bound, rng)?)
        } else {
            None
        };
        let mut dims = vec![d];
        dims.extend(std::iter::repeat(cfg.mlp_hidden).take(cfg.mlp_layers));
        dims.push(cfg.latent);
        let mlp = Mlp::new(store, rng, &format!("{prefix}.mlp"), &dims, cfg.activation)?;
        Ok(Self {
            query,
            input,
            w_k,
            w_v,
            w_o,
            mlp,
            heads: cfg.heads,
            d_model: d,
            layer_norm: cfg.layer_norm,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// `D_t`: one projected row per observation from values `[N, 1]` and embeddings `[N, S]`.
    pub fn build_latent_rows(&self, tape: &mut Tape, store: &ParamStore, values: Var, u: Var) -> Result<Var> {
        if tape.value(values).is_empty() {
            return Err(invalid("cannot encode an empty observation set"));
        }
        let x = tape.concat_cols(&[values, u])?;
        self.input.forward(tape, store, x)
    }

    /// Attention output `[1, D]` before the MLP.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, rows: Var) -> Result<Var> {
        let q = tape.param(store, self.query);
        let w_k = tape.param(store, self.w_k);
        let w_v = tape.param(store, self.w_v);
        match self.w_o {
            None => cross_attention_single(tape, q, rows, w_k, w_v),
            Some(w_o) => {
                let w_o = tape.param(store, w_o);
                multi_head_attention(tape, q, rows, w_k, w_v, w_o, self.heads)
            }
        }
    }

    /// `z_t` as a `[1, P]` row from observation values and their embeddings.
    pub fn encode_rows(&self, tape: &mut Tape, store: &ParamStore, values: Var, u: Var) -> Result<Var> {
        let rows = self.build_latent_rows(tape, store, values, u)?;
        let mut h = self.attend(tape, store, rows)?;
        if self.layer_norm {
            h = tape.normalize_rows(h, 1e-5);
        }
        self.mlp.forward(tape, store, h)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: &CoordinateEmbedding,
        obs: &ObservationSet,
    ) -> Result<Var> {
        let u = embedding.embed_batch(tape, store, &obs.coords)?;
        let y = tape.input(Array::column(obs.values.clone()));
        self.encode_rows(tape, store, y, u)
    }

    /// Evaluates `z_t` as a plain vector.
    pub fn encode_value(
        &self,
        store: &ParamStore,
        embedding: &CoordinateEmbedding,
        obs: &ObservationSet,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let z = self.encode(&mut tape, store, embedding, obs)?;
        Ok(tape.value(z).data().to_vec())
    }
}

/// Attention of query `q` `[1, dq]` over `rows` `[N, D]` with key/value maps
/// `w_k`, `w_v` `[D, dq]`. The logits are computed as `D_t (W_K q^T)` and the
/// output as `(a D_t) W_V`, which equal `q K_t^T` and `a V_t`.
fn attention_head(tape: &mut Tape, q: Var, rows: Var, w_k: Var, w_v: Var) -> Result<Var> {
    let dq = tape.value(q).len();
    let qt = tape.transpose(q)?;
    let kq = tape.matmul(w_k, qt)?;
    let logits = tape.matmul(rows, kq)?;
    let logits = tape.transpose(logits)?;
    let logits = tape.scale(logits, 1.0 / (dq as f64).sqrt());
    let a = tape.softmax(logits, 1)?;
    let pooled = tape.matmul(a, rows)?;
    tape.matmul(pooled, w_v)
}

/// Single-head attention `softmax(q K_t^T / sqrt(D)) V_t`, returned as `[1, D]`.
pub fn cross_attention_single(tape: &mut Tape, q: Var, rows: Var, w_k: Var, w_v: Var) -> Result<Var> {
    attention_head(tape, q, rows, w_k, w_v)
}

/// `H`-head attention; head `h` uses `q[h d_h .. (h+1) d_h]` and the matching
/// column blocks of `W_K`, `W_V`. Heads are concatenated and mapped by `W_O`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    rows: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(q).len();
    if heads == 0 || d % heads != 0 {
        return Err(invalid(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(w_k, lo, hi)?;
        let vh = tape.slice_cols(w_v, lo, hi)?;
        outs.push(attention_head(tape, qh, rows, kh, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, w_o)
}

/// Number of observations kept at `rate`: `ceil(rate N)`, at least one.
pub fn mask_keep_count(n: usize, rate: f64) -> usize {
    let raw = (rate * n as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.clamp(1, n.max(1))
}

/// Sorted indices of a uniformly random subset of `ceil(rate N)` observations, at least one.
pub fn mask_indices(n: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid(format!("mask rate must lie in [0, 1], got {rate}")));
    }
    if n == 0 {
        return Err(invalid("cannot mask an empty observation set"));
    }
    let keep = mask_keep_count(n, rate);
    if keep == n {
        return Ok((0..n).collect());
    }
    let mut idx = sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Keeps a uniformly random subset of `ceil(rate N)` observations (at least one),
/// preserving their original order.
pub fn apply_training_mask(obs: &ObservationSet, rate: f64, rng: &mut impl Rng) -> Result<ObservationSet> {
    let idx = mask_indices(obs.len(), rate, rng)?;
    if idx.len() == obs.len() {
        return Ok(obs.clone());
    }
    obs.subset(&idx)
}
