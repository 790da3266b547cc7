//! The full streaming model: coordinate embedding, set encoder, LegS state and
//! field decoder, plus a frame-by-frame inference processor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{conditioning, Decoder, DecoderConfig, QueryPoints};
use crate::diffarray::{Array, ParamStore, Tape, Var};
use crate::embedding::{CoordinateEmbedding, EmbeddingConfig};
use crate::encoder::{Encoder, EncoderConfig, ObservationSet};
use crate::error::{invalid, Result};
use crate::fields::ValueStats;
use crate::rng::SeedStream;
use crate::ssm::{state_update, state_update_var, HippoSystem, LatentState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// `L`, the LegS order.
    pub state_order: usize,
    /// When off, the decoder sees `X_t = 0` at every frame.
    pub use_ssm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            state_order: 32,
            use_ssm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.state_order == 0 {
            return Err(invalid("state order must be positive"));
        }
        Ok(())
    }

    pub fn cond_dim(&self) -> usize {
        (self.state_order + 1) * self.encoder.latent
    }
}

/// Model structure; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub embedding: CoordinateEmbedding,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub hippo: HippoSystem,
}

/// Differentiable outputs of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub x: Var,
    pub z: Var,
    pub pred: Var,
}

impl Network {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let embedding = CoordinateEmbedding::new(store, rng, "emb", &cfg.embedding)?;
        let encoder = Encoder::new(store, rng, "enc", embedding.dim(), &cfg.encoder)?;
        let decoder = Decoder::new(store, rng, "dec", &cfg.decoder, &embedding.ranks(), cfg.cond_dim())?;
        Ok(Self {
            config: cfg.clone(),
            embedding,
            encoder,
            decoder,
            hippo: HippoSystem::new(cfg.state_order)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.encoder.latent
    }

    pub fn state_order(&self) -> usize {
        self.config.state_order
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Var {
        tape.constant(Array::zeros(&[self.state_order(), self.latent_dim()]))
    }

    /// One recorded frame: encode the observations at `keep`, advance the state
    /// by `dt` and decode at every observed coordinate. Values are normalized.
    pub fn frame(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_prev: Var,
        obs: &ObservationSet,
        keep: &[usize],
        dt: f64,
    ) -> Result<FrameVars> {
        let pts = QueryPoints::new(tape, store, &self.embedding, &obs.coords)?;
        let (u, y) = if keep.len() == obs.len() {
            (pts.joint, Array::column(obs.values.clone()))
        } else {
            let u = tape.gather_rows(pts.joint, keep)?;
            (u, Array::column(keep.iter().map(|&i| obs.values[i]).collect()))
        };
        let y = tape.input(y);
        let z = self.encoder.encode_rows(tape, store, y, u)?;
        let x = if self.config.use_ssm {
            let disc = self.hippo.discretize(dt)?;
            state_update_var(tape, x_prev, z, &disc)?
        } else {
            x_prev
        };
        let cond = conditioning(tape, x, z)?;
        let pred = self.decoder.decode(tape, store, Some(cond), &pts)?;
        Ok(FrameVars { x, z, pred })
    }

    /// Per-frame RMSE on the full observed sets, in frame order.
    ///
    /// `keeps[m]` selects the conditioning subset of frame `m`. With
    /// `detach_after = Some(f)` the state leaving frame `f` is treated as a
    /// constant, cutting the gradient path from earlier frames.
    pub fn frame_losses(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[ObservationSet],
        dts: &[f64],
        keeps: &[Vec<usize>],
        detach_after: Option<usize>,
    ) -> Result<Vec<Var>> {
        if frames.is_empty() || frames.len() != dts.len() || frames.len() != keeps.len() {
            return Err(invalid(format!(
                "{} frames, {} steps and {} masks do not line up",
                frames.len(),
                dts.len(),
                keeps.len()
            )));
        }
        let mut x = self.zero_state(tape);
        let mut losses = Vec::with_capacity(frames.len());
        for (m, ((obs, &dt), keep)) in frames.iter().zip(dts).zip(keeps).enumerate() {
            let out = self.frame(tape, store, x, obs, keep, dt)?;
            let target = tape.input(Array::column(obs.values.clone()));
            losses.push(tape.rmse(out.pred, target)?);
            x = out.x;
            if detach_after == Some(m) {
                x = tape.constant(tape.value(x).clone());
            }
        }
        Ok(losses)
    }

    /// Mean of [`Network::frame_losses`].
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[ObservationSet],
        dts: &[f64],
        keeps: &[Vec<usize>],
        detach_after: Option<usize>,
    ) -> Result<Var> {
        let losses = self.frame_losses(tape, store, frames, dts, keeps, detach_after)?;
        mean_of(tape, &losses)
    }
}

pub(crate) fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let (first, rest) = parts.split_first().ok_or_else(|| invalid("nothing to average"))?;
    let mut total = *first;
    for &p in rest {
        total = tape.add(total, p)?;
    }
    Ok(tape.scale(total, 1.0 / parts.len() as f64))
}

/// A network with its parameters and data normalization.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
    /// Raw time units per normalized step.
    pub time_scale: f64,
    pub value_stats: ValueStats,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: SeedStream) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(cfg, &mut store, &mut seed.child("init").rng())?;
        Ok(Self {
            net,
            store,
            time_scale: 1.0,
            value_stats: ValueStats::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn processor(&self) -> StreamProcessor<'_> {
        StreamProcessor::new(self)
    }

    /// Reconstructions on `coords` after each frame of `frames`, in raw units.
    pub fn reconstruct_stream(&self, frames: &[ObservationSet], coords: &Array) -> Result<Vec<Vec<f64>>> {
        let mut p = self.processor();
        frames
            .iter()
            .map(|f| {
                p.push(f)?;
                p.reconstruct(coords)
            })
            .collect()
    }
}

/// Per-stream inference state: the `L x P` memory and the latest latent. The
/// model is passed in on every call so the state can live apart from it.
#[derive(Clone, Debug)]
pub struct StreamState {
    state: LatentState,
    z: Array,
}

impl StreamState {
    pub fn new(model: &Model) -> Self {
        let p = model.net.latent_dim();
        Self {
            state: LatentState::zeros(model.net.state_order(), p),
            z: Array::zeros(&[1, p]),
        }
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn latent(&self) -> &Array {
        &self.z
    }

    /// Folds one frame into the state. A frame without observations keeps
    /// `z = 0` and only advances the state.
    pub fn push(&mut self, m: &Model, obs: &ObservationSet) -> Result<()> {
        let dt = match self.state.last_time {
            None => 1.0,
            Some(last) if obs.t > last => (obs.t - last) / m.time_scale,
            Some(last) => {
                return Err(invalid(format!(
                    "timestamps must strictly increase: frame at {} follows {last}",
                    obs.t
                )))
            }
        };
        self.z = if obs.is_empty() {
            Array::zeros(&[1, m.net.latent_dim()])
        } else {
            let mut norm = obs.clone();
            for v in &mut norm.values {
                *v = m.value_stats.normalize(*v);
            }
            let mut tape = Tape::new();
            let z = m.net.encoder.encode(&mut tape, &m.store, &m.net.embedding, &norm)?;
            tape.value(z).clone()
        };
        if m.net.config.use_ssm {
            let disc = m.net.hippo.discretize(dt)?;
            self.state.x = state_update(&self.state.x, &self.z, &disc)?;
        }
        self.state.frame += 1;
        self.state.last_time = Some(obs.t);
        Ok(())
    }

    /// Field estimate at `coords` (`N x K`) given everything pushed so far.
    pub fn reconstruct(&self, m: &Model, coords: &Array) -> Result<Vec<f64>> {
        let y = m
            .net
            .decoder
            .batch_decode(&m.store, &m.net.embedding, &self.state.x, &self.z, coords)?;
        Ok(y.into_iter().map(|v| m.value_stats.denormalize(v)).collect())
    }
}

/// Online inference over one stream: frames are consumed in order and only the
/// `L x P` state and the latest latent are kept.
#[derive(Clone, Debug)]
pub struct StreamProcessor<'a> {
    model: &'a Model,
    inner: StreamState,
}

impl<'a> StreamProcessor<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self {
            model,
            inner: StreamState::new(model),
        }
    }

    pub fn state(&self) -> &LatentState {
        self.inner.state()
    }

    pub fn latent(&self) -> &Array {
        self.inner.latent()
    }

    pub fn push(&mut self, obs: &ObservationSet) -> Result<()> {
        self.inner.push(self.model, obs)
    }

    pub fn reconstruct(&self, coords: &Array) -> Result<Vec<f64>> {
        self.inner.reconstruct(self.model, coords)
    }
}
