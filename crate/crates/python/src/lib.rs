//! Python bindings for `glcd_core`.
//!
//! Latents cross the boundary as flat lists or little-endian `float32`
//! bytes plus a `(K, C, H, W)` shape, so `numpy.frombuffer(...).reshape(shape)`
//! works without copying through lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use pythonize::pythonize;

use glcd_core::checks;
use glcd_core::clip_maps::{make_global_maps, make_local_maps, ClipMap, ShiftMode, ShiftPlan};
use glcd_core::config::{Normalize, PipelineConfig};
use glcd_core::fusion::{annealing_gamma, glcd_fuse, AnnealParams};
use glcd_core::io::{self, metrics::compute_metrics};
use glcd_core::noise_reinit::{frequency_fuse as fuse_spectra, make_lpf, FilterKind};
use glcd_core::pipeline::{build_denoiser, RunResult};
use glcd_core::{Error, LatentShape, LatentVideo};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::Config(_) | Error::InvalidValue { .. } | Error::Parse { .. } | Error::Parameter(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Shape { .. } | Error::Size(_) | Error::Format { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn shape_of(shape: (usize, usize, usize, usize)) -> PyResult<LatentShape> {
    LatentShape::new(shape.0, shape.1, shape.2, shape.3).map_err(to_py)
}

fn parse_filter(kind: &str) -> PyResult<FilterKind> {
    match kind {
        "gaussian" => Ok(FilterKind::Gaussian),
        "box" => Ok(FilterKind::IdealBox),
        "all_pass" => Ok(FilterKind::AllPass),
        "all_stop" => Ok(FilterKind::AllStop),
        _ => Err(PyValueError::new_err(format!("unknown filter `{kind}`"))),
    }
}

fn parse_normalize(name: &str) -> PyResult<Normalize> {
    match name {
        "minmax" => Ok(Normalize::Minmax),
        "clamp" => Ok(Normalize::Clamp),
        _ => Err(PyValueError::new_err(format!("unknown normalization `{name}`"))),
    }
}

/// A `(K, C, H, W)` float32 latent video.
#[pyclass(name = "Latent", module = "glcd", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLatent {
    inner: LatentVideo,
}

#[pymethods]
impl PyLatent {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        Ok(PyLatent { inner: LatentVideo::new(shape_of(shape)?, data).map_err(to_py)? })
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> PyResult<Self> {
        Ok(PyLatent { inner: LatentVideo::zeros(shape_of(shape)?) })
    }

    /// Standard normal draw from a seeded stream.
    #[staticmethod]
    #[pyo3(signature = (shape, seed=0))]
    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> PyResult<Self> {
        let mut rng = glcd_core::rng::stream_rng(seed, glcd_core::rng::Stream::Denoiser, 0);
        Ok(PyLatent { inner: glcd_core::rng::standard_normal(shape_of(shape)?, &mut rng) })
    }

    #[staticmethod]
    fn from_bytes(shape: (usize, usize, usize, usize), data: &[u8]) -> PyResult<Self> {
        let shape = shape_of(shape)?;
        if data.len() != shape.len() * 4 {
            return Err(PyValueError::new_err(format!("need {} bytes, got {}", shape.len() * 4, data.len())));
        }
        let values = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(PyLatent { inner: LatentVideo::new(shape, values).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyLatent { inner: io::load_latent(path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_latent(path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let [k, c, h, w] = self.inner.shape().as_array();
        (k, c, h, w)
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let bytes: Vec<u8> = self.inner.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        PyBytes::new(py, &bytes)
    }

    /// Binary PPM images, one per frame.
    #[pyo3(signature = (normalize="minmax"))]
    fn to_ppm<'py>(&self, py: Python<'py>, normalize: &str) -> PyResult<Vec<Bound<'py, PyBytes>>> {
        let frames = io::ppm::encode_frames(&self.inner, parse_normalize(normalize)?);
        Ok(frames.iter().map(|f| PyBytes::new(py, f)).collect())
    }

    /// Per-frame proxy metrics as dicts; undefined entries are `nan`.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        compute_metrics(&self.inner)
            .into_iter()
            .map(|r| {
                let row = PyDict::new(py);
                row.set_item("index", r.index)?;
                row.set_item("flicker", r.flicker)?;
                row.set_item("smoothness", r.smoothness)?;
                row.set_item("patch_consistency", r.patch_consistency)?;
                Ok(row)
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.frames()
    }

    fn __eq__(&self, other: &PyLatent) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Latent(shape={:?})", self.shape())
    }
}

/// Sampler configuration. Keys mirror the TOML file.
#[pyclass(name = "Config", module = "glcd", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses a TOML document; an empty string gives the defaults.
    #[new]
    #[pyo3(signature = (toml=""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: PipelineConfig::from_toml_str(toml).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: PipelineConfig::load(path).map_err(to_py)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        pythonize(py, &self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.run.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.run.seed = seed;
    }

    fn __repr__(&self) -> String {
        let v = &self.inner.video;
        format!(
            "Config(frames={}, clip_len={}, steps={}, denoiser={:?}, seed={})",
            v.frames,
            v.clip_len,
            self.inner.schedule.steps,
            self.inner.denoiser.name.name(),
            self.inner.run.seed
        )
    }
}

/// Output of a run: the final latent and one report dict per step.
#[pyclass(name = "RunResult", module = "glcd", frozen)]
struct PyRunResult {
    inner: RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn z0(&self) -> PyLatent {
        PyLatent { inner: self.inner.z0.clone() }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn reports<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        pythonize(py, &self.inner.reports).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Writes z0.npy, metrics.csv, report.csv and optionally PPM frames.
    #[pyo3(signature = (dir, frames=Some("minmax")))]
    fn write(&self, dir: PathBuf, frames: Option<&str>) -> PyResult<Vec<PathBuf>> {
        let normalize = frames.map(parse_normalize).transpose()?;
        io::write_run_outputs(dir, &self.inner, normalize).map_err(to_py)
    }
}

fn map_dict<'py>(py: Python<'py>, m: &ClipMap) -> PyResult<Bound<'py, PyAny>> {
    let row =
        serde_json::json!({ "path": m.path(), "clip_id": m.clip_id(), "indices": m.indices(), "shift": m.shift() });
    pythonize(py, &row).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// A configured sampler.
#[pyclass(name = "Pipeline", module = "glcd", frozen)]
struct PyPipeline {
    inner: Arc<glcd_core::pipeline::Pipeline>,
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyPipeline { inner: Arc::new(glcd_core::pipeline::Pipeline::new(config.inner.clone()).map_err(to_py)?) })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let [k, c, h, w] = self.inner.shape().as_array();
        (k, c, h, w)
    }

    /// `(t_from, t_to)` pairs of the sampling schedule.
    fn transitions(&self) -> Vec<(usize, usize)> {
        self.inner.schedule().transitions()
    }

    fn gamma(&self, t: usize) -> f64 {
        self.inner.gamma(t, &Default::default())
    }

    fn global_maps<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        self.inner.global_maps().map_err(to_py)?.iter().map(|m| map_dict(py, m)).collect()
    }

    fn local_maps<'py>(&self, py: Python<'py>, t: usize) -> PyResult<Vec<Bound<'py, PyAny>>> {
        self.inner.local_maps(t).map_err(to_py)?.iter().map(|m| map_dict(py, m)).collect()
    }

    fn initial_latent(&self) -> PyResult<PyLatent> {
        Ok(PyLatent { inner: self.inner.initial_latent().map_err(to_py)? })
    }

    /// Runs the sampler with the configured denoiser. Releases the GIL.
    fn run(&self, py: Python<'_>) -> PyResult<PyRunResult> {
        let pipeline = self.inner.clone();
        let result = py.detach(move || {
            let cfg = pipeline.config();
            let denoiser = build_denoiser(cfg, pipeline.schedule().clone())?;
            pipeline.run(denoiser.as_ref()).map_err(|f| f.error)
        });
        Ok(PyRunResult { inner: result.map_err(to_py)? })
    }
}

/// `gamma * global + (1 - gamma) * local`.
#[pyfunction]
fn blend(global_: &PyLatent, local: &PyLatent, gamma: f64) -> PyResult<PyLatent> {
    Ok(PyLatent { inner: glcd_fuse(&global_.inner, &local.inner, gamma).map_err(to_py)?.latent })
}

/// Low frequencies of `z` combined with high frequencies of `eta`.
#[pyfunction]
#[pyo3(signature = (z, eta, kind="gaussian", cutoff=0.25))]
fn frequency_fuse(z: &PyLatent, eta: &PyLatent, kind: &str, cutoff: f64) -> PyResult<PyLatent> {
    let s = z.inner.shape();
    let filter = make_lpf([s.frames, s.height, s.width], parse_filter(kind)?, cutoff).map_err(to_py)?;
    Ok(PyLatent { inner: fuse_spectra(&z.inner, &eta.inner, &filter).map_err(to_py)? })
}

#[pyfunction]
#[pyo3(signature = (t, gamma0=0.005, beta=0.0005))]
fn gamma_at(t: usize, gamma0: f64, beta: f64) -> PyResult<f64> {
    Ok(annealing_gamma(t, &AnnealParams::new(gamma0, beta).map_err(to_py)?))
}

#[pyfunction]
fn global_maps<'py>(
    py: Python<'py>,
    frames: usize,
    clip_len: usize,
    dilation: usize,
) -> PyResult<Vec<Bound<'py, PyAny>>> {
    make_global_maps(frames, clip_len, dilation, dilation * clip_len)
        .map_err(to_py)?
        .iter()
        .map(|m| map_dict(py, m))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (frames, clip_len, stride, t, seed=0, per_clip=false))]
fn local_maps<'py>(
    py: Python<'py>,
    frames: usize,
    clip_len: usize,
    stride: usize,
    t: usize,
    seed: u64,
    per_clip: bool,
) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let mode = if per_clip { ShiftMode::PerClip } else { ShiftMode::Shared };
    let plan = ShiftPlan::new(seed).with_mode(mode);
    make_local_maps(frames, clip_len, stride, t, &plan).map_err(to_py)?.iter().map(|m| map_dict(py, m)).collect()
}

/// Runs the oracle suites; returns `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (filter=None, seed=0))]
fn run_checks(py: Python<'_>, filter: Option<String>, seed: u64) -> Vec<(String, bool, String)> {
    py.detach(move || {
        checks::run_suites(filter.as_deref(), seed)
            .into_iter()
            .map(|o| (o.name.to_string(), o.passed, o.detail))
            .collect()
    })
}

#[pymodule]
fn glcd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLatent>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(blend, m)?)?;
    m.add_function(wrap_pyfunction!(frequency_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_at, m)?)?;
    m.add_function(wrap_pyfunction!(global_maps, m)?)?;
    m.add_function(wrap_pyfunction!(local_maps, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
