//! Synthetic fields, observation sampling and the on-disk data formats.
//!
//! Grid indices map to normalized coordinates by `i / (n - 1)` per mode, so every
//! coordinate lies in `[0, 1]`. Dense values are stored frame-major and row-major
//! within a frame (last mode fastest).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::diffarray::Array;
use crate::encoder::ObservationSet;
use crate::error::{invalid, Error, FormatError, Result};
use crate::rng::SeedStream;

pub const RECORD_MAGIC: [u8; 4] = *b"SPFR";
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FieldRecord {
    pub id: usize,
    pub extents: Vec<usize>,
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
}

impl FieldRecord {
    pub fn new(id: usize, extents: Vec<usize>, timestamps: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if extents.is_empty() || extents.contains(&0) {
            return Err(invalid(format!("grid extents must be positive, got {extents:?}")));
        }
        let g: usize = extents.iter().product();
        if values.len() != g * timestamps.len() {
            return Err(invalid(format!(
                "{} frames of {g} points need {} values, got {}",
                timestamps.len(),
                g * timestamps.len(),
                values.len()
            )));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("timestamps must strictly increase"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("record {id} value {i}")));
        }
        Ok(Self {
            id,
            extents,
            timestamps,
            values,
        })
    }

    pub fn dims(&self) -> usize {
        self.extents.len()
    }

    pub fn grid_size(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn frame(&self, m: usize) -> &[f64] {
        let g = self.grid_size();
        &self.values[m * g..(m + 1) * g]
    }

    /// Multi-index of a flat grid position.
    pub fn grid_index(&self, flat: usize) -> Vec<usize> {
        unravel(&self.extents, flat)
    }

    /// Normalized coordinate of a flat grid position.
    pub fn coord(&self, flat: usize) -> Vec<f64> {
        normalize_index(&self.extents, &self.grid_index(flat))
    }

    /// All grid coordinates as a `G x K` array in flat order.
    pub fn grid_coords(&self) -> Array {
        grid_coords(&self.extents)
    }

    /// Observation set of frame `m` at the given flat positions.
    pub fn observe(&self, m: usize, idx: &[usize]) -> Result<ObservationSet> {
        let frame = self.frame(m);
        let k = self.dims();
        let mut coords = Vec::with_capacity(idx.len() * k);
        let mut values = Vec::with_capacity(idx.len());
        for &i in idx {
            coords.extend(self.coord(i));
            values.push(frame[i]);
        }
        ObservationSet::new(self.timestamps[m], Array::new(vec![idx.len(), k], coords)?, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, id: usize) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(&RECORD_MAGIC, RECORD_VERSION);
        w.u32(self.extents.len() as u32);
        for &e in &self.extents {
            w.u64(e as u64);
        }
        w.u64(self.frames() as u64);
        w.f64s(&self.timestamps);
        w.f64s(&self.values);
        w.buf
    }

    pub fn from_bytes(buf: &[u8], id: usize) -> Result<Self> {
        let mut r = Reader::open(buf, &RECORD_MAGIC, RECORD_VERSION)?;
        let k = r.u32()? as usize;
        let extents = (0..k).map(|_| r.u64().map(|e| e as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let m = r.count(8)?;
        let timestamps = r.f64s(m)?;
        let g = extents.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| {
            FormatError::Corrupt {
                offset: 8,
                reason: format!("grid {extents:?} overflows"),
            }
        })?;
        let n = g.checked_mul(m).ok_or_else(|| FormatError::Corrupt {
            offset: r.pos(),
            reason: "value count overflows".into(),
        })?;
        let values = r.f64s(n)?;
        r.finish()?;
        Self::new(id, extents, timestamps, values)
    }
}

pub fn unravel(extents: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; extents.len()];
    for (k, &n) in extents.iter().enumerate().rev() {
        idx[k] = flat % n;
        flat /= n;
    }
    idx
}

pub fn ravel(extents: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(extents).fold(0, |acc, (&i, &n)| acc * n + i)
}

pub fn normalize_index(extents: &[usize], idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .zip(extents)
        .map(|(&i, &n)| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 })
        .collect()
}

/// Nearest grid index for each normalized component.
pub fn denormalize_coord(extents: &[usize], coord: &[f64]) -> Vec<usize> {
    coord
        .iter()
        .zip(extents)
        .map(|(&x, &n)| ((x * (n - 1) as f64).round().max(0.0) as usize).min(n - 1))
        .collect()
}

pub fn grid_coords(extents: &[usize]) -> Array {
    let g: usize = extents.iter().product();
    let data = (0..g).flat_map(|f| normalize_index(extents, &unravel(extents, f))).collect();
    Array::new(vec![g, extents.len()], data).expect("grid shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    AdvectingGaussian,
    HeatBlobs,
    PlaneWaves,
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "advecting_gaussian" => Ok(Self::AdvectingGaussian),
            "heat_blobs" => Ok(Self::HeatBlobs),
            "plane_waves" => Ok(Self::PlaneWaves),
            other => Err(invalid(format!("unknown generator {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub generator: Generator,
    pub grid: Vec<usize>,
    pub frames: usize,
    pub records: usize,
    /// Number of blobs or waves per record.
    pub components: usize,
    /// Largest speed per axis, in grid cells per unit time.
    pub max_speed: f64,
    /// Blob width range in grid cells.
    pub width: [f64; 2],
    /// Round velocities to whole cells per unit time.
    pub integer_velocity: bool,
    pub dt: f64,
    /// Draw each step from `dt * U[0.5, 1.5]`.
    pub jitter: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            generator: Generator::AdvectingGaussian,
            grid: vec![32, 32],
            frames: 16,
            records: 220,
            components: 2,
            max_speed: 1.0,
            width: [2.5, 5.0],
            integer_velocity: false,
            dt: 1.0,
            jitter: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.iter().any(|&n| n == 0 || n > 64) {
            return Err(invalid(format!("grid extents must lie in 1..=64, got {:?}", self.grid)));
        }
        if self.frames == 0 || self.frames > 48 {
            return Err(invalid(format!("frame count must lie in 1..=48, got {}", self.frames)));
        }
        if self.components == 0 {
            return Err(invalid("at least one component is required"));
        }
        if !(self.dt > 0.0) || !(self.width[0] > 0.0) || self.width[1] < self.width[0] || self.max_speed < 0.0 {
            return Err(invalid("step, widths and speed must be positive and ordered"));
        }
        Ok(())
    }
}

/// Signed minimum-image offset on a ring of length `n`.
fn wrap(d: f64, n: f64) -> f64 {
    d - n * (d / n).round()
}

struct Blob {
    center: Vec<f64>,
    velocity: Vec<f64>,
    width: f64,
    amplitude: f64,
    diffusivity: f64,
}

struct Wave {
    wavevector: Vec<f64>,
    omega: f64,
    phase: f64,
    amplitude: f64,
}

fn timestamps(cfg: &GenConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut t = 0.0;
    let mut out = Vec::with_capacity(cfg.frames);
    for m in 0..cfg.frames {
        if m > 0 {
            t += if cfg.jitter { cfg.dt * rng.gen_range(0.5..1.5) } else { cfg.dt };
        }
        out.push(t);
    }
    out
}

fn gen_record(cfg: &GenConfig, id: usize, seed: SeedStream) -> Result<FieldRecord> {
    let mut rng = seed.rng();
    let k = cfg.grid.len();
    let ext: Vec<f64> = cfg.grid.iter().map(|&n| n as f64).collect();
    let ts = timestamps(cfg, &mut rng);
    let g: usize = cfg.grid.iter().product();
    let points: Vec<Vec<f64>> = (0..g)
        .map(|f| unravel(&cfg.grid, f).into_iter().map(|i| i as f64).collect())
        .collect();
    let mut values = Vec::with_capacity(g * ts.len());
    match cfg.generator {
        Generator::AdvectingGaussian | Generator::HeatBlobs => {
            let heat = cfg.generator == Generator::HeatBlobs;
            let blobs: Vec<Blob> = (0..cfg.components)
                .map(|_| Blob {
                    center: ext.iter().map(|&n| rng.gen_range(0.0..n)).collect(),
                    velocity: (0..k)
                        .map(|_| {
                            if heat || cfg.max_speed == 0.0 {
                                0.0
                            } else if cfg.integer_velocity {
                                rng.gen_range(-cfg.max_speed..=cfg.max_speed).round()
                            } else {
                                rng.gen_range(-cfg.max_speed..=cfg.max_speed)
                            }
                        })
                        .collect(),
                    width: rng.gen_range(cfg.width[0]..=cfg.width[1]),
                    amplitude: rng.gen_range(0.5..1.5),
                    diffusivity: if heat { rng.gen_range(0.2..0.6) } else { 0.0 },
                })
                .collect();
            for &t in &ts {
                for p in &points {
                    let mut v = 0.0;
                    for b in &blobs {
                        let var = b.width * b.width + 2.0 * b.diffusivity * t;
                        let decay = (b.width * b.width / var).powf(k as f64 / 2.0);
                        let r2: f64 = (0..k)
                            .map(|a| wrap(p[a] - b.center[a] - b.velocity[a] * t, ext[a]).powi(2))
                            .sum();
                        v += b.amplitude * decay * (-r2 / (2.0 * var)).exp();
                    }
                    values.push(v);
                }
            }
        }
        Generator::PlaneWaves => {
            let waves: Vec<Wave> = (0..cfg.components)
                .map(|_| {
                    let mut wv: Vec<f64> = (0..k).map(|_| rng.gen_range(-2i32..=2) as f64).collect();
                    if wv.iter().all(|&x| x == 0.0) {
                        wv[0] = 1.0;
                    }
                    Wave {
                        wavevector: wv,
                        omega: rng.gen_range(0.1..0.5),
                        phase: rng.gen_range(0.0..std::f64::consts::TAU),
                        amplitude: rng.gen_range(0.5..1.5),
                    }
                })
                .collect();
            for &t in &ts {
                for p in &points {
                    let v: f64 = waves
                        .iter()
                        .map(|w| {
                            let kx: f64 = (0..k).map(|a| w.wavevector[a] * p[a] / ext[a]).sum();
                            w.amplitude * (std::f64::consts::TAU * kx - w.omega * t + w.phase).sin()
                        })
                        .sum();
                    values.push(v);
                }
            }
        }
    }
    FieldRecord::new(id, cfg.grid.clone(), ts, values)
}

/// Deterministic records `0..cfg.records` from `seed`.
pub fn gen_synthetic(cfg: &GenConfig, seed: u64) -> Result<Vec<FieldRecord>> {
    cfg.validate()?;
    let root = SeedStream::new(seed).child("records");
    (0..cfg.records).map(|r| gen_record(cfg, r, root.index(r as u64))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Uniform,
    Slab,
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "slab" => Ok(Self::Slab),
            other => Err(invalid(format!("unknown sampling pattern {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationStream {
    pub record_id: usize,
    pub pattern: Pattern,
    pub rho: f64,
    pub frames: Vec<ObservationSet>,
}

impl ObservationStream {
    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(invalid(format!("observation ratio must lie in (0, 1], got {rho}")));
    }
    Ok(())
}

/// `round(rho G)`, at least one.
pub fn uniform_count(grid: usize, rho: f64) -> usize {
    ((rho * grid as f64).round() as usize).clamp(1, grid)
}

pub fn uniform_indices(grid: usize, rho: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = index::sample(rng, grid, uniform_count(grid, rho)).into_vec();
    idx.sort_unstable();
    idx
}

/// Uniform random subsets of `round(rho G)` points, fresh per frame unless
/// `fixed_sensors` is set.
pub fn sample_uniform(record: &FieldRecord, rho: f64, seed: SeedStream, fixed_sensors: bool) -> Result<ObservationStream> {
    check_rho(rho)?;
    let mut rng = seed.rng();
    let g = record.grid_size();
    let fixed = uniform_indices(g, rho, &mut rng);
    let frames = (0..record.frames())
        .map(|m| {
            let idx = if fixed_sensors { fixed.clone() } else { uniform_indices(g, rho, &mut rng) };
            record.observe(m, &idx)
        })
        .collect::<Result<_>>()?;
    Ok(ObservationStream {
        record_id: record.id,
        pattern: Pattern::Uniform,
        rho,
        frames,
    })
}

/// Flat indices of a block of `count` whole slices starting at `offset` along `mode`.
pub fn slab_indices(extents: &[usize], mode: usize, offset: usize, count: usize) -> Vec<usize> {
    let g: usize = extents.iter().product();
    (0..g)
        .filter(|&f| {
            let i = unravel(extents, f)[mode];
            i >= offset && i < offset + count
        })
        .collect()
}

/// Number of whole slices along `mode` whose point count is closest to `rho G`, at least one.
pub fn slab_slices(extents: &[usize], mode: usize, rho: f64) -> usize {
    let g: usize = extents.iter().product();
    let slice = (g / extents[mode]) as f64;
    ((rho * g as f64 / slice).round() as usize).clamp(1, extents[mode])
}

/// Per frame, a contiguous block of whole slices along a random mode at a random offset.
pub fn sample_slab(record: &FieldRecord, rho: f64, seed: SeedStream) -> Result<ObservationStream> {
    check_rho(rho)?;
    let mut rng = seed.rng();
    let sliceable: Vec<usize> = (0..record.dims()).filter(|&k| record.extents[k] > 1).collect();
    let modes = if sliceable.is_empty() { vec![0] } else { sliceable };
    let frames = (0..record.frames())
        .map(|m| {
            let mode = *modes.choose(&mut rng).expect("at least one mode");
            let count = slab_slices(&record.extents, mode, rho);
            let offset = rng.gen_range(0..=record.extents[mode] - count);
            record.observe(m, &slab_indices(&record.extents, mode, offset, count))
        })
        .collect::<Result<_>>()?;
    Ok(ObservationStream {
        record_id: record.id,
        pattern: Pattern::Slab,
        rho,
        frames,
    })
}

pub fn sample(record: &FieldRecord, pattern: Pattern, rho: f64, seed: SeedStream) -> Result<ObservationStream> {
    match pattern {
        Pattern::Uniform => sample_uniform(record, rho, seed, false),
        Pattern::Slab => sample_slab(record, rho, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub pattern: Pattern,
    pub rho: f64,
    /// Independent draws per record.
    pub streams_per_record: usize,
    /// Keep one uniform sensor set for the whole stream.
    pub fixed_sensors: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            pattern: Pattern::Uniform,
            rho: 0.1,
            streams_per_record: 1,
            fixed_sensors: false,
        }
    }
}

/// `streams_per_record` streams per record, record-major; draw `k` of record
/// `r` uses `seed.index(r.id).index(k)`.
pub fn sample_streams<'a>(
    records: impl IntoIterator<Item = &'a FieldRecord>,
    cfg: &SamplingConfig,
    seed: SeedStream,
) -> Result<Vec<ObservationStream>> {
    if cfg.streams_per_record == 0 {
        return Err(invalid("streams_per_record must be at least 1"));
    }
    let mut out = Vec::new();
    for r in records {
        for k in 0..cfg.streams_per_record {
            let s = seed.index(r.id as u64).index(k as u64);
            out.push(match cfg.pattern {
                Pattern::Uniform => sample_uniform(r, cfg.rho, s, cfg.fixed_sensors)?,
                Pattern::Slab => sample_slab(r, cfg.rho, s)?,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamLine {
    t: f64,
    coords: Vec<Vec<f64>>,
    values: Vec<f64>,
    pattern: Pattern,
    rho: f64,
    record_id: usize,
}

/// One JSON object per observation set, streams written back to back.
pub fn write_streams(path: &Path, streams: &[ObservationStream]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in streams {
        for f in &s.frames {
            let line = StreamLine {
                t: f.t,
                coords: (0..f.len()).map(|n| f.coord(n).to_vec()).collect(),
                values: f.values.clone(),
                pattern: s.pattern,
                rho: s.rho,
                record_id: s.record_id,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads streams back; consecutive lines with the same record, pattern and
/// ratio and increasing time form one stream.
pub fn read_streams(path: &Path) -> Result<Vec<ObservationStream>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out: Vec<ObservationStream> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Format(FormatError::BadLine { line: i + 1, reason });
        let l: StreamLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let k = l.coords.first().map_or(0, Vec::len);
        if l.coords.iter().any(|c| c.len() != k) {
            return Err(bad("coordinate rows differ in length".into()));
        }
        let coords = Array::new(vec![l.coords.len(), k], l.coords.concat()).map_err(|e| bad(e.to_string()))?;
        let obs = ObservationSet::new(l.t, coords, l.values).map_err(|e| bad(e.to_string()))?;
        let continues = out.last().is_some_and(|s| {
            s.record_id == l.record_id
                && s.pattern == l.pattern
                && s.rho.to_bits() == l.rho.to_bits()
                && s.frames.last().is_some_and(|f| f.t < obs.t)
        });
        if continues {
            out.last_mut().expect("checked").frames.push(obs);
        } else {
            out.push(ObservationStream {
                record_id: l.record_id,
                pattern: l.pattern,
                rho: l.rho,
                frames: vec![obs],
            });
        }
    }
    Ok(out)
}

/// Deterministic split of record ids into `(train, test)`. The test share is
/// `test_count` if given, otherwise a tenth (at least one when possible).
pub fn split_records(n: usize, test_count: Option<usize>, seed: SeedStream) -> Result<(Vec<usize>, Vec<usize>)> {
    let test = test_count.unwrap_or_else(|| ((n as f64 * 0.1).round() as usize).max(usize::from(n > 1)));
    if test > n {
        return Err(invalid(format!("cannot hold out {test} of {n} records")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut seed.rng());
    let mut held = ids.split_off(n - test);
    ids.sort_unstable();
    held.sort_unstable();
    Ok((ids, held))
}

/// Mean and population standard deviation of field values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for ValueStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl ValueStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a FieldRecord>) -> Result<Self> {
        Self::from_values(records.into_iter().flat_map(|r| r.values.iter().copied()))
    }

    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            sum += v;
            sq += v * v;
        }
        if n == 0 {
            return Err(invalid("no values to normalize"));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}
