//! Field decoders queried at continuous coordinates.
//!
//! FT-FiLM modulates the concatenated coordinate embedding `u` (length `S`) with
//! a scale matrix and shift generated from the conditioning vector
//! `c = [vec(X_t); z_t]`:
//!
//! ```text
//! Gamma = Reshape_{V x S}(MLP_1(c)),  beta = MLP_2(c)
//! y     = f_phi(Gamma u + beta)
//! ```
//!
//! The functional Tucker baseline contracts a core with the per-mode vectors,
//! `y = vec(G)^T (u^1 kron ... kron u^K)`. Its core is either a free parameter or
//! generated from `c`. All flattening is row-major.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffarray::{Array, ParamId, ParamStore, Tape, Var};
use crate::embedding::CoordinateEmbedding;
use crate::error::{invalid, Error, Result};
use crate::nn::{Activation, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    FtFilm,
    /// Tucker contraction with a core generated from the conditioning vector.
    Ftm,
    /// Tucker contraction with a single learned core.
    FtmStatic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// `V`, the modulated width.
    pub modulation: usize,
    pub film_hidden: usize,
    pub film_layers: usize,
    /// Hidden layers of the readout, each of width `V`.
    pub readout_layers: usize,
    pub activation: Activation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::FtFilm,
            modulation: 64,
            film_hidden: 256,
            film_layers: 2,
            readout_layers: 2,
            activation: Activation::Gelu,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modulation == 0 {
            return Err(invalid("modulation width must be positive"));
        }
        if self.film_layers > 0 && self.film_hidden == 0 {
            return Err(invalid("modulation network hidden width must be positive"));
        }
        Ok(())
    }
}

fn mlp_dims(input: usize, hidden: usize, layers: usize, out: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat(hidden).take(layers));
    dims.push(out);
    dims
}

/// `[vec(X); z]` as a `[1, LP + P]` row.
pub fn conditioning(tape: &mut Tape, x: Var, z: Var) -> Result<Var> {
    let n = tape.value(x).len();
    let flat = tape.reshape(x, &[1, n])?;
    let p = tape.value(z).len();
    let z = tape.reshape(z, &[1, p])?;
    tape.concat_cols(&[flat, z])
}

/// Scale matrix `V x S` and shift `V` for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams {
    pub gamma: Array,
    pub beta: Array,
}

#[derive(Clone, Debug)]
pub struct FilmNets {
    pub gamma_net: Mlp,
    pub beta_net: Mlp,
    pub readout: Mlp,
    pub modulation: usize,
    pub embed_dim: usize,
}

impl FilmNets {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &DecoderConfig,
        embed_dim: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        let v = cfg.modulation;
        let gamma_net = Mlp::new(
            store,
            rng,
            &format!("{prefix}.gamma"),
            &mlp_dims(cond_dim, cfg.film_hidden, cfg.film_layers, v * embed_dim),
            cfg.activation,
        )?;
        let beta_net = Mlp::new(
            store,
            rng,
            &format!("{prefix}.beta"),
            &mlp_dims(cond_dim, cfg.film_hidden, cfg.film_layers, v),
            cfg.activation,
        )?;
        let readout = Mlp::new(
            store,
            rng,
            &format!("{prefix}.readout"),
            &mlp_dims(v, v, cfg.readout_layers, 1),
            cfg.activation,
        )?;
        Ok(Self {
            gamma_net,
            beta_net,
            readout,
            modulation: v,
            embed_dim,
        })
    }

    /// `(Gamma [V, S], beta [1, V])` from a conditioning row.
    pub fn film_params(&self, tape: &mut Tape, store: &ParamStore, cond: Var) -> Result<(Var, Var)> {
        let want = self.gamma_net.in_dim();
        if tape.value(cond).len() != want {
            return Err(Error::ShapeMismatch {
                op: "film_params",
                lhs: tape.value(cond).shape().to_vec(),
                rhs: vec![1, want],
            });
        }
        let flat = self.gamma_net.forward(tape, store, cond)?;
        let gamma = tape.reshape(flat, &[self.modulation, self.embed_dim])?;
        let beta = self.beta_net.forward(tape, store, cond)?;
        Ok((gamma, beta))
    }

    pub fn film_params_value(&self, store: &ParamStore, x: &Array, z: &Array) -> Result<FilmParams> {
        let mut tape = Tape::new();
        let (xv, zv) = (tape.input(x.clone()), tape.input(z.clone()));
        let cond = conditioning(&mut tape, xv, zv)?;
        let (g, b) = self.film_params(&mut tape, store, cond)?;
        Ok(FilmParams {
            gamma: tape.value(g).clone(),
            beta: tape.value(b).clone(),
        })
    }

    /// `f_phi(u Gamma^T + beta)` for a batch `u` of shape `[N, S]`, giving `[N, 1]`.
    pub fn query(&self, tape: &mut Tape, store: &ParamStore, gamma: Var, beta: Var, u: Var) -> Result<Var> {
        let gt = tape.transpose(gamma)?;
        let m = tape.matmul(u, gt)?;
        let m = tape.add_row(m, beta)?;
        self.readout.forward(tape, store, m)
    }

    /// Single-point query `f_phi(Gamma u + beta)`.
    pub fn query_value(&self, store: &ParamStore, params: &FilmParams, u: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let g = tape.input(params.gamma.clone());
        let b = tape.input(params.beta.clone());
        let uv = tape.input(Array::row(u.to_vec()));
        let y = self.query(&mut tape, store, g, b, uv)?;
        Ok(tape.value(y).item())
    }
}

#[derive(Clone, Debug)]
pub enum FtmCore {
    Static(ParamId),
    Conditional(Mlp),
}

/// Per-mode and joint embeddings of a query batch, built once and reusable
/// across frames on the same tape.
#[derive(Clone, Debug)]
pub struct QueryPoints {
    pub modes: Vec<Var>,
    pub joint: Var,
    pub len: usize,
}

impl QueryPoints {
    pub fn new(tape: &mut Tape, store: &ParamStore, embedding: &CoordinateEmbedding, coords: &Array) -> Result<Self> {
        let modes = embedding.embed_modes(tape, store, coords)?;
        let joint = tape.concat_cols(&modes)?;
        Ok(Self {
            modes,
            joint,
            len: coords.rows(),
        })
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    FtFilm(FilmNets),
    Ftm { core: FtmCore, ranks: Vec<usize> },
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &DecoderConfig,
        ranks: &[usize],
        cond_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let s: usize = ranks.iter().sum();
        let prod: usize = ranks.iter().product();
        Ok(match cfg.kind {
            DecoderKind::FtFilm => Decoder::FtFilm(FilmNets::new(store, rng, prefix, cfg, s, cond_dim)?),
            DecoderKind::Ftm => Decoder::Ftm {
                core: FtmCore::Conditional(Mlp::new(
                    store,
                    rng,
                    &format!("{prefix}.core"),
                    &mlp_dims(cond_dim, cfg.film_hidden, cfg.film_layers, prod),
                    cfg.activation,
                )?),
                ranks: ranks.to_vec(),
            },
            DecoderKind::FtmStatic => Decoder::Ftm {
                core: FtmCore::Static(store.add_uniform(format!("{prefix}.core"), &[1, prod], 1.0, rng)?),
                ranks: ranks.to_vec(),
            },
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::FtFilm(_) => DecoderKind::FtFilm,
            Decoder::Ftm { core: FtmCore::Conditional(_), .. } => DecoderKind::Ftm,
            Decoder::Ftm { core: FtmCore::Static(_), .. } => DecoderKind::FtmStatic,
        }
    }

    /// Field values `[N, 1]` at the query points. `cond` is ignored by a static core.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, cond: Option<Var>, points: &QueryPoints) -> Result<Var> {
        let need = || invalid("this decoder needs a conditioning vector");
        match self {
            Decoder::FtFilm(nets) => {
                let (g, b) = nets.film_params(tape, store, cond.ok_or_else(need)?)?;
                nets.query(tape, store, g, b, points.joint)
            }
            Decoder::Ftm { core, ranks } => {
                if points.modes.len() != ranks.len() {
                    return Err(invalid(format!(
                        "core has {} modes but {} mode embeddings were given",
                        ranks.len(),
                        points.modes.len()
                    )));
                }
                let g = match core {
                    FtmCore::Static(id) => tape.param(store, *id),
                    FtmCore::Conditional(net) => net.forward(tape, store, cond.ok_or_else(need)?)?,
                };
                ftm_contract(tape, g, &points.modes)
            }
        }
    }

    /// Evaluates the field at `coords` for the given state and latent.
    pub fn batch_decode(
        &self,
        store: &ParamStore,
        embedding: &CoordinateEmbedding,
        x: &Array,
        z: &Array,
        coords: &Array,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let points = QueryPoints::new(&mut tape, store, embedding, coords)?;
        let (xv, zv) = (tape.input(x.clone()), tape.input(z.clone()));
        let cond = conditioning(&mut tape, xv, zv)?;
        let y = self.decode(&mut tape, store, Some(cond), &points)?;
        Ok(tape.value(y).data().to_vec())
    }
}

/// `vec(G)^T (u^1 kron .. kron u^K)` row-wise; `core` is `[1, prod R_k]`, modes are `[N, R_k]`.
pub fn ftm_contract(tape: &mut Tape, core: Var, modes: &[Var]) -> Result<Var> {
    let (first, rest) = modes.split_first().ok_or_else(|| invalid("no mode embeddings"))?;
    let mut kron = *first;
    for &m in rest {
        kron = tape.row_kron(kron, m)?;
    }
    let width = tape.value(kron).cols();
    if tape.value(core).len() != width {
        return Err(Error::ShapeMismatch {
            op: "ftm_query",
            lhs: tape.value(core).shape().to_vec(),
            rhs: vec![width],
        });
    }
    let col = tape.reshape(core, &[width, 1])?;
    tape.matmul(kron, col)
}

/// Single-point Tucker query from plain vectors.
pub fn ftm_query(core: &[f64], modes: &[Vec<f64>]) -> Result<f64> {
    let width: usize = modes.iter().map(Vec::len).product();
    if modes.is_empty() || width != core.len() {
        return Err(invalid(format!(
            "core has {} entries but mode ranks {:?} need {width}",
            core.len(),
            modes.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let mut tape = Tape::new();
    let c = tape.input(Array::row(core.to_vec()));
    let m: Vec<Var> = modes.iter().map(|u| tape.input(Array::row(u.clone()))).collect();
    let y = ftm_contract(&mut tape, c, &m)?;
    Ok(tape.value(y).item())
}
