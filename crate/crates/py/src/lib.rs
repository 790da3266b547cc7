//! Python bindings: synthetic data, the streaming model, training and metrics.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use streamphy::diffarray::Array;
use streamphy::encoder::ObservationSet as CoreObs;
use streamphy::fields::{self, FieldRecord as CoreRecord, GenConfig, ObservationStream, Pattern};
use streamphy::model::{Model as CoreModel, ModelConfig, StreamState};
use streamphy::rng::SeedStream;
use streamphy::train::{self, Checkpoint, TrainConfig};
use streamphy::{eval, ssm, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(a: &Array) -> Vec<Vec<f64>> {
    let (r, _) = a.dims2();
    (0..r).map(|i| a.row_slice(i).to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array> {
    Array::from_rows(rows).map_err(py_err)
}

fn parse_pattern(s: &str) -> PyResult<Pattern> {
    s.parse().map_err(py_err)
}

/// Zero-based HiPPO-LegS pair `(A, b)` of order `order`.
#[pyfunction]
fn hippo_legs(order: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let (a, b) = ssm::hippo_legs(order).map_err(py_err)?;
    Ok((rows(&a), b.data().to_vec()))
}

/// Bilinear discretization of a lower-triangular `(A, b)` at step `dt`.
#[pyfunction]
fn discretize_bilinear(a: Vec<Vec<f64>>, b: Vec<f64>, dt: f64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let a = matrix(&a)?;
    let b = Array::column(b);
    let d = ssm::discretize_bilinear(&a, &b, dt).map_err(py_err)?;
    Ok((rows(&d.a_bar), d.b_bar.data().to_vec()))
}

#[pyfunction]
fn vrmse(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    eval::vrmse(&pred, &truth).map_err(py_err)
}

/// Normalized coordinates of every point of a grid, row-major.
#[pyfunction]
fn grid_coords(extents: Vec<usize>) -> Vec<Vec<f64>> {
    rows(&fields::grid_coords(&extents))
}

#[pyclass(name = "ObservationSet", module = "streamphy", from_py_object)]
#[derive(Clone)]
struct PyObs {
    inner: CoreObs,
}

#[pymethods]
impl PyObs {
    #[new]
    fn new(t: f64, coords: Vec<Vec<f64>>, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreObs::from_points(t, &coords, values).map_err(py_err)?,
        })
    }

    #[getter]
    fn t(&self) -> f64 {
        self.inner.t
    }

    #[getter]
    fn coords(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len()).map(|n| self.inner.coord(n).to_vec()).collect()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("ObservationSet(t={}, n={})", self.inner.t, self.inner.len())
    }
}

#[pyclass(name = "FieldRecord", module = "streamphy", from_py_object)]
#[derive(Clone)]
struct PyRecord {
    inner: CoreRecord,
}

#[pymethods]
impl PyRecord {
    #[staticmethod]
    fn load(path: PathBuf, id: usize) -> PyResult<Self> {
        Ok(Self {
            inner: CoreRecord::load(&path, id).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn id(&self) -> usize {
        self.inner.id
    }

    #[getter]
    fn extents(&self) -> Vec<usize> {
        self.inner.extents.clone()
    }

    #[getter]
    fn timestamps(&self) -> Vec<f64> {
        self.inner.timestamps.clone()
    }

    fn frames(&self) -> usize {
        self.inner.frames()
    }

    /// Values of frame `m`, row-major over the grid.
    fn frame(&self, m: usize) -> PyResult<Vec<f64>> {
        if m >= self.inner.frames() {
            return Err(PyValueError::new_err(format!("frame {m} out of range")));
        }
        Ok(self.inner.frame(m).to_vec())
    }

    fn grid_coords(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.grid_coords())
    }

    /// One observation stream under `pattern` (`"uniform"` or `"slab"`) at ratio `rho`.
    #[pyo3(signature = (pattern, rho, seed=0))]
    fn sample(&self, pattern: &str, rho: f64, seed: u64) -> PyResult<Vec<PyObs>> {
        let s = fields::sample(&self.inner, parse_pattern(pattern)?, rho, SeedStream::new(seed)).map_err(py_err)?;
        Ok(s.frames.into_iter().map(|inner| PyObs { inner }).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "FieldRecord(id={}, extents={:?}, frames={})",
            self.inner.id,
            self.inner.extents,
            self.inner.frames()
        )
    }
}

/// Synthetic records from a JSON generator config (defaults when omitted).
#[pyfunction]
#[pyo3(signature = (config=None, seed=0))]
fn generate(config: Option<&str>, seed: u64) -> PyResult<Vec<PyRecord>> {
    let cfg: GenConfig = match config {
        Some(c) => serde_json::from_str(c).map_err(json_err)?,
        None => GenConfig::default(),
    };
    let recs = fields::gen_synthetic(&cfg, seed).map_err(py_err)?;
    Ok(recs.into_iter().map(|inner| PyRecord { inner }).collect())
}

#[pyclass(name = "Model", module = "streamphy")]
struct PyModel {
    inner: Arc<CoreModel>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model from a JSON model config.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = match config {
            Some(c) => serde_json::from_str(c).map_err(json_err)?,
            None => ModelConfig::default(),
        };
        Ok(Self {
            inner: Arc::new(CoreModel::new(&cfg, SeedStream::new(seed)).map_err(py_err)?),
        })
    }

    #[staticmethod]
    fn load_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self { inner: Arc::new(ck.model) })
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(json_err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.values().iter().map(|a| a.len()).sum()
    }

    fn stream(&self) -> PyStream {
        PyStream {
            model: Arc::clone(&self.inner),
            state: StreamState::new(&self.inner),
        }
    }

    /// Reconstructions at `coords` after each frame.
    fn reconstruct_stream(&self, frames: Vec<PyObs>, coords: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let frames: Vec<CoreObs> = frames.into_iter().map(|f| f.inner).collect();
        self.inner.reconstruct_stream(&frames, &matrix(&coords)?).map_err(py_err)
    }

    /// Streams `frames` and scores the full-grid reconstructions against `record`.
    fn score(&self, frames: Vec<PyObs>, record: &PyRecord) -> PyResult<f64> {
        let frames = frames.into_iter().map(|f| f.inner);
        let s = eval::evaluate_stream(&self.inner, frames, &record.inner, |_, _| Ok(())).map_err(py_err)?;
        Ok(s.vrmse)
    }
}

/// Online inference over a single stream.
#[pyclass(name = "StreamProcessor", module = "streamphy")]
struct PyStream {
    model: Arc<CoreModel>,
    state: StreamState,
}

#[pymethods]
impl PyStream {
    fn push(&mut self, obs: &PyObs) -> PyResult<()> {
        self.state.push(&self.model, &obs.inner).map_err(py_err)
    }

    fn reconstruct(&self, coords: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.state.reconstruct(&self.model, &matrix(&coords)?).map_err(py_err)
    }

    #[getter]
    fn frames_seen(&self) -> usize {
        self.state.state().frame
    }

    /// Shape of the memory matrix, constant over the stream.
    #[getter]
    fn state_shape(&self) -> Vec<usize> {
        self.state.state().x.shape().to_vec()
    }
}

/// Trains on `streams`, given as `(record_id, frames)` pairs, and returns the
/// model with its per-epoch losses.
#[pyfunction]
#[pyo3(signature = (config, streams, checkpoint=None))]
fn train_model(
    config: &str,
    streams: Vec<(usize, Vec<PyObs>)>,
    checkpoint: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg: TrainConfig = serde_json::from_str(config).map_err(json_err)?;
    let streams: Vec<ObservationStream> = streams
        .into_iter()
        .map(|(record_id, frames)| ObservationStream {
            record_id,
            pattern: Pattern::Uniform,
            rho: 1.0,
            frames: frames.into_iter().map(|f| f.inner).collect(),
        })
        .collect();
    let out = train::train(&cfg, &streams, None).map_err(py_err)?;
    if let Some(p) = checkpoint {
        out.checkpoint.save(&p).map_err(py_err)?;
    }
    Ok((
        PyModel {
            inner: Arc::new(out.checkpoint.model),
        },
        out.epoch_losses,
    ))
}

/// Numerical rank of a matrix at relative tolerance `1e-8` and its singular values.
#[pyfunction]
fn numerical_rank(m: Vec<Vec<f64>>) -> PyResult<(usize, Vec<f64>)> {
    Ok(eval::numerical_rank(&matrix(&m)?, 1e-8))
}

#[pymodule]
#[pyo3(name = "streamphy")]
fn streamphy_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyObs>()?;
    m.add_class::<PyRecord>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyStream>()?;
    m.add_function(wrap_pyfunction!(hippo_legs, m)?)?;
    m.add_function(wrap_pyfunction!(discretize_bilinear, m)?)?;
    m.add_function(wrap_pyfunction!(vrmse, m)?)?;
    m.add_function(wrap_pyfunction!(grid_coords, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(numerical_rank, m)?)?;
    Ok(())
}
