//! HiPPO-LegS state-space recurrence.
//!
//! The continuous system `x' = A x + b s` uses the fixed LegS pair
//!
//! ```text
//! A[l][k] = -sqrt((2l+1)(2k+1))  if l > k
//!           -(l+1)               if l = k
//!           0                    if l < k
//! b[l]    = sqrt(2l+1)
//! ```
//!
//! with zero-based `l, k`. It is discretized per step size with the bilinear
//! transform and drives an `L x P` state, one LegS memory per latent channel.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::diffarray::{Array, Tape, Var};
use crate::error::{invalid, Error, Result};

/// Continuous-time LegS matrices `(A, b)` of order `l`.
pub fn hippo_legs(l: usize) -> Result<(Array, Array)> {
    if l == 0 {
        return Err(invalid("state order must be at least 1"));
    }
    let mut a = Array::zeros(&[l, l]);
    for row in 0..l {
        for col in 0..=row {
            let v = if row == col {
                -((row + 1) as f64)
            } else {
                -(((2 * row + 1) * (2 * col + 1)) as f64).sqrt()
            };
            a.set2(row, col, v);
        }
    }
    let b = Array::vector((0..l).map(|i| ((2 * i + 1) as f64).sqrt()).collect());
    Ok((a, b))
}

/// Discrete pair `(A_bar, b_bar)` for one step size.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized {
    pub dt: f64,
    pub a_bar: Array,
    pub b_bar: Array,
}

/// Solves `M x = rhs` for lower-triangular `M` by forward substitution.
fn forward_substitute(m: &Array, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = m.rows();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let d = m.get2(i, i);
        if d.abs() < f64::MIN_POSITIVE || !d.is_finite() {
            return Err(Error::Singular(format!("resolvent pivot {i} is {d}")));
        }
        let mut acc = rhs[i];
        for j in 0..i {
            acc -= m.get2(i, j) * x[j];
        }
        x[i] = acc / d;
    }
    Ok(x)
}

/// Bilinear transform: `A_bar = (I - dt/2 A)^{-1} (I + dt/2 A)`,
/// `b_bar = (I - dt/2 A)^{-1} dt b`. `A` must be lower triangular.
pub fn discretize_bilinear(a: &Array, b: &Array, dt: f64) -> Result<Discretized> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(invalid(format!("step size must be positive and finite, got {dt}")));
    }
    let (l, l2) = a.dims2();
    if l != l2 || a.ndim() != 2 || b.len() != l {
        return Err(Error::ShapeMismatch {
            op: "discretize_bilinear",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    for i in 0..l {
        for j in i + 1..l {
            if a.get2(i, j) != 0.0 {
                return Err(invalid("transition matrix must be lower triangular"));
            }
        }
    }
    let h = 0.5 * dt;
    let mut lhs = Array::identity(l);
    let mut rhs = Array::identity(l);
    for i in 0..l {
        for j in 0..=i {
            let v = h * a.get2(i, j);
            lhs.set2(i, j, lhs.get2(i, j) - v);
            rhs.set2(i, j, rhs.get2(i, j) + v);
        }
    }
    let mut a_bar = Array::zeros(&[l, l]);
    for col in 0..l {
        let column: Vec<f64> = (0..l).map(|i| rhs.get2(i, col)).collect();
        let x = forward_substitute(&lhs, &column)?;
        for (i, v) in x.into_iter().enumerate() {
            a_bar.set2(i, col, v);
        }
    }
    let scaled: Vec<f64> = b.data().iter().map(|v| dt * v).collect();
    let b_bar = Array::vector(forward_substitute(&lhs, &scaled)?);
    Ok(Discretized { dt, a_bar, b_bar })
}

/// Fixed LegS system of order `L` plus a cache of discretizations keyed by
/// the step size rounded to 12 significant digits.
#[derive(Debug)]
pub struct HippoSystem {
    order: usize,
    a: Array,
    b: Array,
    cache: Mutex<HashMap<String, Arc<Discretized>>>,
}

impl Clone for HippoSystem {
    fn clone(&self) -> Self {
        Self {
            order: self.order,
            a: self.a.clone(),
            b: self.b.clone(),
            cache: Mutex::new(self.cache.lock().expect("cache poisoned").clone()),
        }
    }
}

fn dt_key(dt: f64) -> String {
    format!("{dt:.11e}")
}

impl HippoSystem {
    pub fn new(order: usize) -> Result<Self> {
        let (a, b) = hippo_legs(order)?;
        Ok(Self {
            order,
            a,
            b,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn a(&self) -> &Array {
        &self.a
    }

    pub fn b(&self) -> &Array {
        &self.b
    }

    pub fn discretize(&self, dt: f64) -> Result<Arc<Discretized>> {
        let key = dt_key(dt);
        if let Some(d) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(Arc::clone(d));
        }
        let d = Arc::new(discretize_bilinear(&self.a, &self.b, dt)?);
        let mut cache = self.cache.lock().expect("cache poisoned");
        Ok(Arc::clone(cache.entry(key).or_insert(d)))
    }

    pub fn cached_steps(&self) -> usize {
        self.cache.lock().expect("cache poisoned").len()
    }
}

/// The `L x P` augmented state carried between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Array,
    pub frame: usize,
    pub last_time: Option<f64>,
}

impl LatentState {
    pub fn zeros(order: usize, channels: usize) -> Self {
        Self {
            x: Array::zeros(&[order, channels]),
            frame: 0,
            last_time: None,
        }
    }
}

/// `X_t = A_bar X_{t-1} + b_bar z_t^T`.
pub fn state_update(x_prev: &Array, z: &Array, disc: &Discretized) -> Result<Array> {
    let l = disc.b_bar.len();
    let (rows, p) = x_prev.dims2();
    if rows != l || x_prev.ndim() != 2 || z.len() != p {
        return Err(Error::ShapeMismatch {
            op: "state_update",
            lhs: x_prev.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    let mut out = disc.a_bar.matmul(x_prev)?;
    for i in 0..l {
        let bi = disc.b_bar.data()[i];
        for (o, zj) in out.data_mut()[i * p..(i + 1) * p].iter_mut().zip(z.data()) {
            *o += bi * zj;
        }
    }
    Ok(out)
}

/// Differentiable form of [`state_update`].
pub fn state_update_var(tape: &mut Tape, x_prev: Var, z: Var, disc: &Discretized) -> Result<Var> {
    let l = disc.b_bar.len();
    let xv = tape.value(x_prev);
    if xv.rows() != l || xv.cols() != tape.value(z).len() {
        return Err(Error::ShapeMismatch {
            op: "state_update",
            lhs: xv.shape().to_vec(),
            rhs: tape.value(z).shape().to_vec(),
        });
    }
    let a = tape.constant(disc.a_bar.clone());
    let b = tape.constant(disc.b_bar.clone());
    let ax = tape.matmul(a, x_prev)?;
    let inj = tape.outer(b, z);
    tape.add(ax, inj)
}

/// Classical single-input SSM readout, used to check the recurrence in tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarSsm {
    pub c: Vec<f64>,
    pub d: f64,
}

impl ScalarSsm {
    /// One step: `x' = A_bar x + b_bar s`, `eta = c^T x' + d s`.
    pub fn step(&self, x: &[f64], s: f64, disc: &Discretized) -> Result<(Vec<f64>, f64)> {
        let l = disc.b_bar.len();
        if x.len() != l || self.c.len() != l {
            return Err(invalid(format!(
                "state has {} entries and readout {}, system order is {l}",
                x.len(),
                self.c.len()
            )));
        }
        let mut next = vec![0.0; l];
        for (i, n) in next.iter_mut().enumerate() {
            *n = disc.a_bar.row_slice(i).iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
                + disc.b_bar.data()[i] * s;
        }
        let eta = self.c.iter().zip(&next).map(|(c, v)| c * v).sum::<f64>() + self.d * s;
        Ok((next, eta))
    }
}

/// Converts raw timestamps into normalized step sizes.
///
/// Steps are divided by `time_scale`; the first frame gets a step of exactly
/// one normalized unit, as if the stream were preceded by a frame one typical
/// interval earlier.
pub fn step_sizes(timestamps: &[f64], time_scale: f64) -> Result<Vec<f64>> {
    if !(time_scale > 0.0) {
        return Err(invalid(format!("time scale must be positive, got {time_scale}")));
    }
    let mut out = Vec::with_capacity(timestamps.len());
    for (i, &t) in timestamps.iter().enumerate() {
        if i == 0 {
            out.push(1.0);
        } else {
            let dt = t - timestamps[i - 1];
            if !(dt > 0.0) {
                return Err(invalid(format!(
                    "timestamps must strictly increase: t[{}] = {} then t[{i}] = {t}",
                    i - 1,
                    timestamps[i - 1]
                )));
            }
            out.push(dt / time_scale);
        }
    }
    Ok(out)
}

/// Median of the positive gaps between consecutive timestamps across streams.
pub fn median_step(streams: &[Vec<f64>]) -> Option<f64> {
    let mut gaps: Vec<f64> = streams
        .iter()
        .flat_map(|ts| ts.windows(2).map(|w| w[1] - w[0]))
        .filter(|d| *d > 0.0)
        .collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(|a, b| a.total_cmp(b));
    let n = gaps.len();
    Some(if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    })
}
