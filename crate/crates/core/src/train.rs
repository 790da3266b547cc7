//! Sequence training with per-frame random masking, Adam, and checkpoints.
//!
//! Each record is unrolled from `X_0 = 0` over all of its frames. At every frame
//! a mask rate is drawn from `U[lo, hi]`, the encoder sees the kept subset and
//! the decoder is scored by RMSE on the full observed set. The frame losses are
//! averaged, gradients flow through the whole unrolled sequence and one Adam
//! step is taken per batch of records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::diffarray::{Array, Tape};
use crate::encoder::{mask_indices, ObservationSet};
use crate::error::{invalid, Error, FormatError, Result};
use crate::fields::{ObservationStream, ValueStats};
use crate::model::{mean_of, Model, ModelConfig};
use crate::rng::SeedStream;
use crate::ssm::{median_step, step_sizes};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    /// Records per optimizer step.
    pub batch_size: usize,
    pub mask_range: [f64; 2],
    pub use_mask: bool,
    /// Global gradient-norm ceiling; off when absent.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    /// Stop after the step that crosses this wall-clock budget.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            epochs: 10,
            batch_size: 4,
            mask_range: [0.1, 1.0],
            use_mask: true,
            clip_norm: None,
            seed: 0,
            precision: Precision::F64,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.precision == Precision::F32 {
            return Err(Error::Config("32-bit precision is not supported; use \"f64\"".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let [lo, hi] = self.mask_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("mask_range must be an ordered pair in [0, 1], got {:?}", self.mask_range)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new(params: &[Array]) -> Self {
        let zeros = || params.iter().map(|p| Array::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of `params` from `grads`. Non-finite gradients abort before
    /// anything is modified.
    pub fn update(&mut self, params: &mut [Array], grads: &[Array], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(invalid(format!(
                "{} parameters, {} gradients and {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Trained model plus everything needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub epochs_done: usize,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, SeedStream::new(config.seed))?;
        let optimizer = Adam::new(model.store.values());
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            epochs_done: 0,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.bytes(serde_json::to_string(&self.config)?.as_bytes());
        w.f64(self.model.time_scale);
        w.f64(self.model.value_stats.mean);
        w.f64(self.model.value_stats.std);
        w.u64(self.epochs_done as u64);
        w.u64(self.optimizer.step);
        w.u64(self.model.store.len() as u64);
        for (id, name, value) in self.model.store.iter() {
            w.bytes(name.as_bytes());
            w.u32(value.ndim() as u32);
            for &d in value.shape() {
                w.u64(d as u64);
            }
            w.f64s(value.data());
            w.f64s(self.optimizer.m[id.index()].data());
            w.f64s(self.optimizer.v[id.index()].data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, &CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let at = r.pos();
        let cfg_text = std::str::from_utf8(r.bytes()?).map_err(|e| FormatError::Corrupt {
            offset: at,
            reason: e.to_string(),
        })?;
        let config: TrainConfig = serde_json::from_str(cfg_text).map_err(|e| FormatError::Corrupt {
            offset: at,
            reason: format!("config: {e}"),
        })?;
        let mut ck = Self::new(&config)?;
        ck.model.time_scale = r.f64()?;
        ck.model.value_stats = ValueStats {
            mean: r.f64()?,
            std: r.f64()?,
        };
        ck.epochs_done = r.u64()? as usize;
        ck.optimizer.step = r.u64()?;
        let n = r.u64()? as usize;
        if n != ck.model.store.len() {
            return Err(FormatError::Corrupt {
                offset: r.pos(),
                reason: format!("{n} parameters stored, model has {}", ck.model.store.len()),
            }
            .into());
        }
        for _ in 0..n {
            let at = r.pos();
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| FormatError::Corrupt {
                offset: at,
                reason: e.to_string(),
            })?;
            let id = ck.model.store.id(&name).ok_or_else(|| FormatError::Corrupt {
                offset: at,
                reason: format!("unknown parameter {name:?}"),
            })?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let expected = ck.model.store.get(id).shape().to_vec();
            if shape != expected {
                return Err(FormatError::ParamShape {
                    name,
                    expected,
                    found: shape,
                }
                .into());
            }
            let len: usize = shape.iter().product();
            ck.model.store.get_mut(id).data_mut().copy_from_slice(&r.f64s(len)?);
            ck.optimizer.m[id.index()].data_mut().copy_from_slice(&r.f64s(len)?);
            ck.optimizer.v[id.index()].data_mut().copy_from_slice(&r.f64s(len)?);
        }
        r.finish()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    /// Mean step loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
    pub seconds: f64,
}

/// A stream prepared for training: normalized values and normalized steps.
struct Prepared {
    record_id: usize,
    frames: Vec<ObservationSet>,
    dts: Vec<f64>,
}

fn prepare(streams: &[ObservationStream], model: &Model) -> Result<Vec<Prepared>> {
    streams
        .iter()
        .map(|s| {
            let frames: Vec<ObservationSet> = s
                .frames
                .iter()
                .map(|f| {
                    let mut f = f.clone();
                    for v in &mut f.values {
                        *v = model.value_stats.normalize(*v);
                    }
                    f
                })
                .collect();
            if frames.is_empty() || frames.iter().any(|f| f.is_empty()) {
                return Err(invalid(format!("record {} has an empty frame", s.record_id)));
            }
            Ok(Prepared {
                record_id: s.record_id,
                dts: step_sizes(&s.timestamps(), model.time_scale)?,
                frames,
            })
        })
        .collect()
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var("STREAMPHY_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))
}

/// Loss and parameter gradients of one record under the given masks.
fn record_grad(ck: &Checkpoint, p: &Prepared, keeps: &[Vec<usize>]) -> Result<(f64, Vec<Array>)> {
    let net = &ck.model.net;
    let store = &ck.model.store;
    let mut tape = Tape::new();
    let losses = net.frame_losses(&mut tape, store, &p.frames, &p.dts, keeps, None)?;
    for (m, &l) in losses.iter().enumerate() {
        let v = tape.item(l);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v} at record {} frame {m}", p.record_id)));
        }
    }
    let loss = mean_of(&mut tape, &losses)?;
    let grads = tape.backward(loss, store)?;
    Ok((tape.item(loss), grads.into_params()))
}

fn draw_keeps(cfg: &TrainConfig, p: &Prepared, seed: SeedStream) -> Result<Vec<Vec<usize>>> {
    let mut rng = seed.rng();
    p.frames
        .iter()
        .map(|f| {
            if cfg.use_mask {
                let [lo, hi] = cfg.mask_range;
                let rate = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                mask_indices(f.len(), rate, &mut rng)
            } else {
                Ok((0..f.len()).collect())
            }
        })
        .collect()
}

/// Sets the time scale and value statistics of a fresh model from the training streams.
pub fn fit_normalization(model: &mut Model, streams: &[ObservationStream]) -> Result<()> {
    let times: Vec<Vec<f64>> = streams.iter().map(|s| s.timestamps()).collect();
    model.time_scale = median_step(&times).unwrap_or(1.0);
    model.value_stats =
        ValueStats::from_values(streams.iter().flat_map(|s| s.frames.iter().flat_map(|f| f.values.iter().copied())))?;
    Ok(())
}

/// Trains a fresh model on `streams` for `config.epochs` epochs.
pub fn train(config: &TrainConfig, streams: &[ObservationStream], log_path: Option<&Path>) -> Result<TrainOutcome> {
    let mut ck = Checkpoint::new(config)?;
    fit_normalization(&mut ck.model, streams)?;
    resume(ck, streams, config.epochs, log_path)
}

/// Runs `epochs` more epochs on an existing checkpoint.
pub fn resume(
    mut ck: Checkpoint,
    streams: &[ObservationStream],
    epochs: usize,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    ck.config.validate()?;
    if streams.is_empty() {
        return Err(invalid("no training streams"));
    }
    let cfg = ck.config.clone();
    let data = prepare(streams, &ck.model)?;
    let pool = thread_pool()?;
    let mut sink = match log_path {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let root = SeedStream::new(cfg.seed);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut stopped_early = false;

    'epochs: for _ in 0..epochs {
        let epoch = ck.epochs_done;
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut root.child("shuffle").index(epoch as u64).rng());
        let mask_seed = root.child("mask").index(epoch as u64);
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<Array>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let keeps = draw_keeps(&cfg, &data[i], mask_seed.index(i as u64))?;
                        record_grad(&ck, &data[i], &keeps)
                    })
                    .collect()
            });
            let mut total = 0.0;
            let mut grads: Option<Vec<Array>> = None;
            for r in results {
                let (l, g) = r?;
                total += l;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(scale));
            if let Some(c) = cfg.clip_norm {
                let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > c {
                    grads.iter_mut().for_each(|g| g.scale_assign(c / norm));
                }
            }
            ck.optimizer.update(ck.model.store.values_mut(), &grads, cfg.lr)?;
            let entry = LogEntry {
                epoch,
                step: ck.optimizer.step,
                loss: total * scale,
                lr: cfg.lr,
            };
            if let Some(w) = sink.as_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
            }
            losses.push(entry.loss);
            log.push(entry);
            if cfg.max_seconds.is_some_and(|s| start.elapsed().as_secs_f64() > s) {
                stopped_early = true;
                log::warn!("time budget reached during epoch {epoch}");
                break 'epochs;
            }
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
        ck.epochs_done += 1;
    }
    if let Some(mut w) = sink {
        w.flush()?;
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
        epoch_losses,
        stopped_early,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecoderConfig, DecoderKind};
    use crate::embedding::EmbeddingConfig;
    use crate::encoder::EncoderConfig;
    use crate::fields::{gen_synthetic, sample_uniform, GenConfig};
    use crate::nn::Activation;

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                embedding: EmbeddingConfig { ranks: vec![3, 3], frequencies: 3, hidden: 8, hidden_layers: 1 },
                encoder: EncoderConfig {
                    d_model: 8,
                    heads: 2,
                    latent: 4,
                    mlp_hidden: 8,
                    mlp_layers: 1,
                    activation: Activation::Gelu,
                    layer_norm: false,
                },
                decoder: DecoderConfig {
                    kind: DecoderKind::FtFilm,
                    modulation: 6,
                    film_hidden: 8,
                    film_layers: 1,
                    readout_layers: 1,
                    activation: Activation::Gelu,
                },
                state_order: 4,
                use_ssm: true,
            },
            lr: 5e-3,
            epochs: 2,
            batch_size: 2,
            seed: 3,
            ..Default::default()
        }
    }

    fn streams(records: usize, frames: usize) -> Vec<ObservationStream> {
        let g = GenConfig { grid: vec![8, 8], frames, records, ..Default::default() };
        gen_synthetic(&g, 1)
            .unwrap()
            .iter()
            .map(|r| sample_uniform(r, 0.25, SeedStream::new(r.id as u64), false).unwrap())
            .collect()
    }

    /// Scalar Adam written out independently.
    fn adam_oracle(p0: f64, grads: impl Fn(f64) -> f64, lr: f64, steps: usize) -> Vec<f64> {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        let mut out = vec![];
        for t in 1..=steps {
            let g = grads(p);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + 1e-8);
            out.push(p);
        }
        out
    }

    #[test]
    fn adam_zero_gradient() {
        let mut p = vec![Array::vector(vec![1.0, -2.0])];
        let mut opt = Adam::new(&p);
        opt.m[0] = Array::vector(vec![0.5, 0.5]);
        opt.v[0] = Array::vector(vec![0.25, 0.25]);
        opt.update(&mut p, &[Array::vector(vec![0.0, 0.0])], 0.1).unwrap();
        assert_eq!(opt.m[0].data(), &[0.45, 0.45]);
        assert!(opt.v[0].data()[0] < 0.25);
        let mut p = vec![Array::vector(vec![1.0, -2.0])];
        let mut opt = Adam::new(&p);
        for _ in 0..5 {
            opt.update(&mut p, &[Array::vector(vec![0.0, 0.0])], 0.1).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![Array::vector(vec![0.0, 0.0, 0.0])];
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &[Array::vector(vec![3.0, -0.01, 1e3])], 0.01).unwrap();
        for (x, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-6);
            assert!(x.abs() <= 0.01 * (1.0 + 1e-8));
        }
    }

    #[test]
    fn adam_matches_scalar_oracle_on_bowl() {
        let target = [3.0, -1.0];
        let mut p = vec![Array::vector(vec![0.0, 0.0])];
        let mut opt = Adam::new(&p);
        let mut traj = vec![];
        for _ in 0..10 {
            let g: Vec<f64> = p[0].data().iter().zip(&target).map(|(x, c)| 2.0 * (x - c)).collect();
            opt.update(&mut p, &[Array::vector(g)], 0.1).unwrap();
            traj.push(p[0].data().to_vec());
        }
        for (k, &c) in target.iter().enumerate() {
            let want = adam_oracle(0.0, |x| 2.0 * (x - c), 0.1, 10);
            for (t, w) in want.iter().enumerate() {
                assert!((traj[t][k] - w).abs() < 1e-12);
            }
        }
        let dist = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        assert!(dist(&traj[9]) < dist(&[0.0, 0.0]));
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![Array::vector(vec![1.0])];
        let mut opt = Adam::new(&p);
        assert!(opt.update(&mut p, &[Array::vector(vec![f64::NAN])], 0.1).is_err());
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn frame_loss_examples() {
        let ck = Checkpoint::new(&tiny()).unwrap();
        let mut model = ck.model;
        let last = model.net.decoder.clone();
        let readout = match &last {
            crate::decoder::Decoder::FtFilm(n) => n.readout.layers.last().unwrap().clone(),
            _ => unreachable!(),
        };
        model.store.get_mut(readout.w).scale_assign(0.0);
        model.store.get_mut(readout.b).scale_assign(0.0);
        let obs = ObservationSet::from_points(0.0, &[vec![0.1, 0.2], vec![0.5, 0.9], vec![0.7, 0.3]], vec![1.0; 3])
            .unwrap();
        let all = vec![vec![0, 1, 2]];
        let mut t = Tape::new();
        let l = model.net.sequence_loss(&mut t, &model.store, &[obs.clone()], &[1.0], &all, None).unwrap();
        assert!((t.item(l) - 1.0).abs() < 1e-15);
        *model.store.get_mut(readout.b) = Array::full(&[1, 1], 1.0);
        let mut t = Tape::new();
        let l = model.net.sequence_loss(&mut t, &model.store, &[obs], &[1.0], &all, None).unwrap();
        assert_eq!(t.item(l), 0.0);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cfg = TrainConfig { lr: 0.0, ..tiny() };
        let s = streams(3, 3);
        let out = train(&cfg, &s, None).unwrap();
        let fresh = Checkpoint::new(&cfg).unwrap();
        assert_eq!(out.checkpoint.model.store, fresh.model.store);
    }

    #[test]
    fn training_is_deterministic() {
        let s = streams(4, 3);
        let a = train(&tiny(), &s, None).unwrap();
        let b = train(&tiny(), &s, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn loss_falls_on_a_single_frame() {
        let cfg = TrainConfig { use_mask: false, batch_size: 1, epochs: 50, lr: 3e-3, ..tiny() };
        let s = streams(1, 1);
        let out = train(&cfg, &s, None).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|e| e.loss).collect();
        let windows: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
        for w in windows.windows(2) {
            assert!(w[1] < w[0], "{windows:?}");
        }
    }

    #[test]
    fn gradients_reach_back_through_time() {
        let ck = Checkpoint::new(&tiny()).unwrap();
        let s = &streams(1, 3)[0];
        let data = prepare(std::slice::from_ref(s), &ck.model).unwrap();
        let keeps: Vec<Vec<usize>> = data[0].frames.iter().map(|f| (0..f.len()).collect()).collect();
        let grad = |detach: Option<usize>| {
            let mut t = Tape::new();
            let l = ck
                .model
                .net
                .sequence_loss(&mut t, &ck.model.store, &data[0].frames, &data[0].dts, &keeps, detach)
                .unwrap();
            let g = t.backward(l, &ck.model.store).unwrap();
            g.param(ck.model.net.encoder.w_v).clone()
        };
        let full = grad(None);
        let cut = grad(Some(0));
        let diff: f64 = full.data().iter().zip(cut.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-8, "{diff}");
    }

    #[test]
    fn non_finite_loss_names_record_and_frame() {
        let mut ck = Checkpoint::new(&tiny()).unwrap();
        let s = streams(2, 2);
        fit_normalization(&mut ck.model, &s).unwrap();
        let id = ck.model.net.encoder.query;
        ck.model.store.get_mut(id).data_mut()[0] = f64::NAN;
        let err = resume(ck, &s[..1], 1, None).unwrap_err().to_string();
        assert!(err.contains("record 0 frame 0"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = streams(2, 3);
        let out = train(&tiny(), &s, None).unwrap();
        let bytes = out.checkpoint.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let coords = crate::fields::grid_coords(&[8, 8]);
        let a = out.checkpoint.model.reconstruct_stream(&s[0].frames, &coords).unwrap();
        let b = back.model.reconstruct_stream(&s[0].frames, &coords).unwrap();
        assert_eq!(a, b);

        let mut ver = bytes.clone();
        ver[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&ver).unwrap_err().to_string();
        assert!(err.contains('7') && err.contains('1'), "{err}");

        let mut other = tiny();
        other.model.encoder.latent = 5;
        let mut ck = Checkpoint::new(&other).unwrap();
        ck.config = tiny();
        assert!(matches!(
            Checkpoint::from_bytes(&ck.to_bytes().unwrap()),
            Err(Error::Format(FormatError::ParamShape { .. }))
        ));
    }

    #[test]
    fn single_precision_is_rejected() {
        let cfg = TrainConfig { precision: Precision::F32, ..tiny() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
