//! Metrics, streaming evaluation and the experiment harnesses.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{ftm_contract, DecoderKind};
use crate::diffarray::{Array, ParamStore, Tape, Var};
use crate::embedding::{CoordinateEmbedding, EmbeddingConfig};
use crate::encoder::ObservationSet;
use crate::error::{invalid, Error, Result};
use crate::fields::{grid_coords, sample, FieldRecord, ObservationStream, Pattern};
use crate::model::Model;
use crate::nn::{Activation, Mlp};
use crate::rng::SeedStream;
use crate::train::{train, Adam, TrainConfig, TrainOutcome};

/// `RMSE(pred, truth) / std(truth)` with the population standard deviation.
pub fn vrmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "vrmse",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if truth.len() < 2 {
        return Err(Error::UndefinedMetric(format!("need at least two points, got {}", truth.len())));
    }
    if truth.iter().all(|&y| y == truth[0]) {
        return Err(Error::UndefinedMetric("ground truth is constant".into()));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let rmse = |a: &mut dyn Iterator<Item = f64>| (a.map(|d| d * d).sum::<f64>() / n).sqrt();
    let num = rmse(&mut pred.iter().zip(truth).map(|(p, y)| p - y));
    let den = rmse(&mut truth.iter().map(|y| mean - y));
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("ground truth has zero variance".into()));
    }
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub record_id: usize,
    pub vrmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub pattern: Pattern,
    pub rho: f64,
    pub records: Vec<RecordScore>,
    pub mean_vrmse: f64,
    pub seconds_per_frame: f64,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamScore {
    pub vrmse: f64,
    pub frames: usize,
    pub seconds: f64,
}

/// Streams `frames` through `model` in order. After each frame the full grid of
/// `record` is reconstructed and handed to `emit` before the next frame is
/// requested. The score pools every frame's grid points.
pub fn evaluate_stream<I>(
    model: &Model,
    frames: I,
    record: &FieldRecord,
    mut emit: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<StreamScore>
where
    I: IntoIterator<Item = ObservationSet>,
{
    let coords = record.grid_coords();
    let mut proc = model.processor();
    let mut pred = Vec::with_capacity(record.values.len());
    let mut truth = Vec::with_capacity(record.values.len());
    let start = Instant::now();
    let mut count = 0;
    for (m, obs) in frames.into_iter().enumerate() {
        if m >= record.frames() {
            return Err(invalid(format!("stream has more frames than record {}", record.id)));
        }
        if obs.t != record.timestamps[m] {
            return Err(invalid(format!(
                "frame {m} is stamped {} but record {} has {}",
                obs.t, record.id, record.timestamps[m]
            )));
        }
        proc.push(&obs)?;
        let y = proc.reconstruct(&coords)?;
        emit(m, &y)?;
        pred.extend_from_slice(&y);
        truth.extend_from_slice(record.frame(m));
        count += 1;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(StreamScore {
        vrmse: vrmse(&pred, &truth)?,
        frames: count,
        seconds,
    })
}

/// Samples each record under `pattern` at `rho` and scores the model on it.
pub fn evaluate(
    model: &Model,
    records: &[FieldRecord],
    pattern: Pattern,
    rho: f64,
    seed: SeedStream,
    variant: &str,
) -> Result<EvalReport> {
    let streams = records
        .iter()
        .map(|r| sample(r, pattern, rho, seed.index(r.id as u64)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_streams(model, records, &streams, variant)
}

/// Scores pre-sampled streams, matched to records by id.
pub fn evaluate_streams(
    model: &Model,
    records: &[FieldRecord],
    streams: &[ObservationStream],
    variant: &str,
) -> Result<EvalReport> {
    let first = streams.first().ok_or_else(|| invalid("no streams to evaluate"))?;
    let scores = streams
        .par_iter()
        .map(|s| {
            let record = records
                .iter()
                .find(|r| r.id == s.record_id)
                .ok_or_else(|| invalid(format!("no record with id {}", s.record_id)))?;
            let score = evaluate_stream(model, s.frames.iter().cloned(), record, |_, _| Ok(()))?;
            Ok((s.record_id, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let frames: usize = scores.iter().map(|(_, s)| s.frames).sum();
    let seconds: f64 = scores.iter().map(|(_, s)| s.seconds).sum();
    let records: Vec<RecordScore> = scores
        .iter()
        .map(|(id, s)| RecordScore {
            record_id: *id,
            vrmse: s.vrmse,
        })
        .collect();
    Ok(EvalReport {
        variant: variant.to_string(),
        pattern: first.pattern,
        rho: first.rho,
        mean_vrmse: records.iter().map(|r| r.vrmse).sum::<f64>() / records.len() as f64,
        records,
        seconds_per_frame: seconds / frames.max(1) as f64,
    })
}

fn grid_shape(extents: &[usize], len: usize) -> Result<(usize, usize)> {
    let cols = *extents.last().ok_or_else(|| invalid("empty grid"))?;
    if extents.iter().product::<usize>() != len {
        return Err(invalid(format!("{len} values do not fill grid {extents:?}")));
    }
    Ok((len / cols, cols))
}

/// One CSV row per grid row (last mode along columns).
pub fn write_csv_grid(path: &Path, extents: &[usize], values: &[f64]) -> Result<()> {
    let (rows, cols) = grid_shape(extents, values.len())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..rows {
        w.write_record(values[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// 8-bit binary graymap with `lo` mapped to black and `hi` to white.
pub fn write_pgm(path: &Path, extents: &[usize], values: &[f64], lo: f64, hi: f64) -> Result<()> {
    let (rows, cols) = grid_shape(extents, values.len())?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Number of singular values above `rel_tol * sigma_1`, with the sorted values.
pub fn numerical_rank(m: &Array, rel_tol: f64) -> (usize, Vec<f64>) {
    let (r, c) = m.dims2();
    let mat = DMatrix::from_row_slice(r, c, m.data());
    let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > rel_tol * top && s > 0.0).count();
    (rank, sv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankProbe {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// `det[exp(alpha_j beta_k)]` over the same points.
    pub exp_det: f64,
}

fn check_distinct(name: &str, xs: &[f64]) -> Result<()> {
    for (i, a) in xs.iter().enumerate() {
        if xs[..i].contains(a) {
            return Err(invalid(format!("{name} values must be distinct; {a} repeats")));
        }
    }
    Ok(())
}

/// Evaluates `f` on the `alphas x betas` grid and reports its numerical rank.
pub fn rank_probe(f: impl Fn(f64, f64) -> Result<f64>, alphas: &[f64], betas: &[f64]) -> Result<RankProbe> {
    check_distinct("alpha", alphas)?;
    check_distinct("beta", betas)?;
    if alphas.is_empty() || alphas.len() != betas.len() {
        return Err(invalid("alpha and beta lists must be non-empty and equally long"));
    }
    let m = alphas.len();
    let mut vals = Vec::with_capacity(m * m);
    for &a in alphas {
        for &b in betas {
            vals.push(f(a, b)?);
        }
    }
    let (rank, singular_values) = numerical_rank(&Array::new(vec![m, m], vals)?, 1e-8);
    let exp = DMatrix::from_fn(m, m, |j, k| (alphas[j] * betas[k]).exp());
    Ok(RankProbe {
        rank,
        singular_values,
        exp_det: exp.determinant(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpressivityConfig {
    pub grid: usize,
    pub ranks: [usize; 2],
    pub modulation: usize,
    pub readout_layers: usize,
    pub frequencies: usize,
    pub embed_hidden: usize,
    pub embed_layers: usize,
    pub activation: Activation,
    pub steps: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
}

impl Default for ExpressivityConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            ranks: [2, 2],
            modulation: 64,
            readout_layers: 1,
            frequencies: 4,
            embed_hidden: 32,
            embed_layers: 1,
            activation: Activation::Gelu,
            steps: 5000,
            lr: 1e-3,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityRun {
    pub seed: u64,
    pub ftfilm_rmse: f64,
    pub ftm_rmse: f64,
    pub ftm_rank: usize,
    pub ftm_singular_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityReport {
    pub config: ExpressivityConfig,
    pub target_std: f64,
    pub runs: Vec<ExpressivityRun>,
    pub median_ftfilm_rmse: f64,
    pub median_ftm_rmse: f64,
    /// `det[exp(alpha_j beta_k)]` for `alpha = beta = (0, 1)`.
    pub witness_det: f64,
    /// Fits whose RMSE stayed above a tenth of the target's spread.
    pub unconverged: Vec<String>,
    pub seconds: f64,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits a static decoder to `target` on `coords` by Adam on the MSE; returns the final RMSE.
fn fit_static(
    store: &mut ParamStore,
    steps: usize,
    lr: f64,
    target: &Array,
    forward: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<f64> {
    let mut opt = Adam::new(store.values());
    for _ in 0..steps {
        let mut tape = Tape::new();
        let y = forward(&mut tape, store)?;
        let t = tape.constant(target.clone());
        let loss = tape.mse(y, t)?;
        let g = tape.backward(loss, store)?;
        opt.update(store.values_mut(), g.params(), lr)?;
    }
    let mut tape = Tape::new();
    let y = forward(&mut tape, store)?;
    let t = tape.constant(target.clone());
    let loss = tape.rmse(y, t)?;
    Ok(tape.item(loss))
}

/// Fits FT-FiLM and a static-core Tucker decoder to `exp(i_1 i_2)` on a square
/// grid with equal ranks, budgets and mode-network initialization.
pub fn expressivity_experiment(cfg: &ExpressivityConfig) -> Result<ExpressivityReport> {
    if cfg.grid < 2 || cfg.seeds.is_empty() || cfg.modulation < 2 {
        return Err(invalid("need a grid of at least 2, one seed and modulation width of at least 2"));
    }
    let start = Instant::now();
    let n = cfg.grid;
    let coords = grid_coords(&[n, n]);
    let target = Array::column((0..n * n).map(|f| (coords.get2(f, 0) * coords.get2(f, 1)).exp()).collect());
    let ecfg = EmbeddingConfig {
        ranks: cfg.ranks.to_vec(),
        frequencies: cfg.frequencies,
        hidden: cfg.embed_hidden,
        hidden_layers: cfg.embed_layers,
    };
    let s: usize = cfg.ranks.iter().sum();
    let target_std = {
        let mean = target.sum() / (n * n) as f64;
        (target.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n * n) as f64).sqrt()
    };
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let root = SeedStream::new(seed);

            let mut store = ParamStore::new();
            let emb = CoordinateEmbedding::new(&mut store, &mut root.child("embedding").rng(), "emb", &ecfg)?;
            let v = cfg.modulation;
            let mut rng = root.child("film").rng();
            let gamma = store.add_uniform("gamma", &[v, s], 1.0 / (s as f64).sqrt(), &mut rng)?;
            let beta = store.add_uniform("beta", &[1, v], 1.0 / (s as f64).sqrt(), &mut rng)?;
            let mut dims = vec![v];
            dims.extend(std::iter::repeat(v).take(cfg.readout_layers));
            dims.push(1);
            let readout = Mlp::new(&mut store, &mut rng, "readout", &dims, cfg.activation)?;
            let ftfilm_rmse = fit_static(&mut store, cfg.steps, cfg.lr, &target, |t, st| {
                let u = emb.embed_batch(t, st, &coords)?;
                let (g, b) = (t.param(st, gamma), t.param(st, beta));
                let gt = t.transpose(g)?;
                let m = t.matmul(u, gt)?;
                let m = t.add_row(m, b)?;
                readout.forward(t, st, m)
            })?;

            let mut store = ParamStore::new();
            let emb = CoordinateEmbedding::new(&mut store, &mut root.child("embedding").rng(), "emb", &ecfg)?;
            let prod: usize = cfg.ranks.iter().product();
            let core = store.add_uniform("core", &[1, prod], 1.0, &mut root.child("ftm").rng())?;
            let forward = |t: &mut Tape, st: &ParamStore, c: &Array| -> Result<Var> {
                let modes = emb.embed_modes(t, st, c)?;
                let g = t.param(st, core);
                ftm_contract(t, g, &modes)
            };
            let ftm_rmse = fit_static(&mut store, cfg.steps, cfg.lr, &target, |t, st| forward(t, st, &coords))?;
            let axis: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let mut tape = Tape::new();
            let y = forward(&mut tape, &store, &coords)?;
            let values = tape.value(y).data().to_vec();
            let probe = rank_probe(
                |a, b| {
                    let j = axis.iter().position(|&x| x == a).expect("grid point");
                    let k = axis.iter().position(|&x| x == b).expect("grid point");
                    Ok(values[j * n + k])
                },
                &axis,
                &axis,
            )?;
            log::info!("seed {seed}: ft-film rmse {ftfilm_rmse:.3e}, ftm rmse {ftm_rmse:.3e}, ftm rank {}", probe.rank);
            Ok(ExpressivityRun {
                seed,
                ftfilm_rmse,
                ftm_rmse,
                ftm_rank: probe.rank,
                ftm_singular_values: probe.singular_values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut unconverged = Vec::new();
    for r in &runs {
        for (name, e) in [("ft-film", r.ftfilm_rmse), ("ftm", r.ftm_rmse)] {
            if !(e < 0.1 * target_std) {
                unconverged.push(format!("{name} seed {}: rmse {e:.3e} vs target std {target_std:.3e}", r.seed));
            }
        }
    }
    let witness = rank_probe(|_, _| Ok(0.0), &[0.0, 1.0], &[0.0, 1.0])?.exp_det;
    Ok(ExpressivityReport {
        config: cfg.clone(),
        target_std,
        median_ftfilm_rmse: median(&runs.iter().map(|r| r.ftfilm_rmse).collect::<Vec<_>>()),
        median_ftm_rmse: median(&runs.iter().map(|r| r.ftm_rmse).collect::<Vec<_>>()),
        runs,
        witness_det: witness,
        unconverged,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSsm,
    NoMask,
    WithFtm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoSsm, Variant::NoMask, Variant::WithFtm];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSsm => "w/o SSM",
            Variant::NoMask => "w/o mask",
            Variant::WithFtm => "with FTM",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoSsm => c.model.use_ssm = false,
            Variant::NoMask => c.use_mask = false,
            Variant::WithFtm => c.model.decoder.kind = DecoderKind::Ftm,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub uniform_rho: f64,
    pub slab_rho: f64,
    pub seed: u64,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            uniform_rho: 0.05,
            slab_rho: 0.03,
            seed: 1,
        }
    }
}

impl EvalPlan {
    /// Uniform and slab reports for one model.
    pub fn run(&self, model: &Model, records: &[FieldRecord], variant: &str) -> Result<(EvalReport, EvalReport)> {
        let seed = SeedStream::new(self.seed);
        Ok((
            evaluate(model, records, Pattern::Uniform, self.uniform_rho, seed.child("uniform"), variant)?,
            evaluate(model, records, Pattern::Slab, self.slab_rho, seed.child("slab"), variant)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub uniform: EvalReport,
    pub slab: EvalReport,
    pub train_seconds: f64,
}

impl AblationRow {
    /// Mean of the two pattern scores.
    pub fn mean(&self) -> f64 {
        0.5 * (self.uniform.mean_vrmse + self.slab.mean_vrmse)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_text(&self) -> String {
        let (u, s) = self
            .rows
            .first()
            .map_or((0.0, 0.0), |r| (r.uniform.rho * 100.0, r.slab.rho * 100.0));
        let mut out = format!(
            "{:<10} {:>14} {:>14} {:>10}\n",
            "variant",
            format!("uniform {u:.0}%"),
            format!("slab {s:.0}%"),
            "mean"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>14.4} {:>14.4} {:>10.4}\n",
                r.variant.label(),
                r.uniform.mean_vrmse,
                r.slab.mean_vrmse,
                r.mean()
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "uniform_rho", "uniform_vrmse", "slab_rho", "slab_vrmse", "mean_vrmse"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.label().to_string(),
                r.uniform.rho.to_string(),
                r.uniform.mean_vrmse.to_string(),
                r.slab.rho.to_string(),
                r.slab.mean_vrmse.to_string(),
                r.mean().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains every variant with the same seed and budget and evaluates each under
/// both patterns. Models already trained for a variant can be passed in
/// `trained` and are reused as is.
pub fn ablation_run(
    base: &TrainConfig,
    train_streams: &[ObservationStream],
    test_records: &[FieldRecord],
    plan: &EvalPlan,
    variants: &[Variant],
    trained: &[(Variant, TrainOutcome)],
) -> Result<AblationTable> {
    let rows = variants
        .iter()
        .map(|&v| {
            let owned;
            let outcome = match trained.iter().find(|(tv, _)| *tv == v) {
                Some((_, o)) => o,
                None => {
                    log::info!("training variant {}", v.label());
                    owned = train(&v.apply(base), train_streams, None)?;
                    &owned
                }
            };
            let (uniform, slab) = plan.run(&outcome.checkpoint.model, test_records, v.label())?;
            Ok(AblationRow {
                variant: v,
                uniform,
                slab,
                train_seconds: outcome.seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub frames: usize,
    pub total_seconds: f64,
    pub per_frame_seconds: f64,
    /// Mean frame time over the first and second half of the stream.
    pub half_means: [f64; 2],
    /// Scalars held by the stream state after the last frame.
    pub state_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub entries: Vec<TimingEntry>,
    /// `total(T_{i+1}) / total(T_i)` for consecutive entries.
    pub ratios: Vec<f64>,
}

/// Times online inference on random streams of each length in `lengths`, with
/// `n_obs` observations per frame and a full reconstruction of `extents` after
/// every frame. Each length is timed `repeats` times and the fastest run kept.
pub fn timing_probe(
    model: &Model,
    lengths: &[usize],
    n_obs: usize,
    extents: &[usize],
    repeats: usize,
    seed: SeedStream,
) -> Result<TimingReport> {
    let k = model.config().embedding.ranks.len();
    if extents.len() != k || n_obs == 0 {
        return Err(invalid(format!("query grid must have {k} modes and frames at least one point")));
    }
    let coords = grid_coords(extents);
    let make = |t: usize| -> Result<Vec<ObservationSet>> {
        let mut rng = seed.index(t as u64).rng();
        (0..t)
            .map(|m| {
                let c: Vec<f64> = (0..n_obs * k).map(|_| rng.gen()).collect();
                let v: Vec<f64> = (0..n_obs).map(|_| rng.gen_range(-1.0..1.0)).collect();
                ObservationSet::new(m as f64, Array::new(vec![n_obs, k], c)?, v)
            })
            .collect()
    };
    // warm the step cache and allocator
    let warm = make(2)?;
    model.reconstruct_stream(&warm, &coords)?;
    let mut entries = Vec::new();
    for &t in lengths {
        let frames = make(t)?;
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..repeats.max(1) {
            let mut proc = model.processor();
            let mut times = Vec::with_capacity(t);
            let start = Instant::now();
            for f in &frames {
                let s = Instant::now();
                proc.push(f)?;
                proc.reconstruct(&coords)?;
                times.push(s.elapsed().as_secs_f64());
            }
            let total = start.elapsed().as_secs_f64();
            let len = proc.state().x.len() + proc.latent().len();
            if best.as_ref().map_or(true, |b| total < b.0) {
                best = Some((total, times, len));
            }
        }
        let (total, times, state_len) = best.expect("at least one repeat");
        let h = (times.len() / 2).max(1);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        entries.push(TimingEntry {
            frames: t,
            total_seconds: total,
            per_frame_seconds: total / t.max(1) as f64,
            half_means: [mean(&times[..h.min(times.len())]), mean(&times[h.min(times.len())..])],
            state_len,
        });
    }
    let ratios = entries
        .windows(2)
        .map(|w| w[1].total_seconds / w[0].total_seconds)
        .collect();
    Ok(TimingReport { entries, ratios })
}
