//! Python bindings (`import scaleformer_py`).
//!
//! Tensors cross the boundary as `Tensor` objects (shape + flat row-major
//! float32 data, convertible with `tolist()`); configs are built from keyword
//! arguments with the same names and defaults as the JSON config files, and
//! unknown keywords are rejected. Library errors surface as `ValueError`
//! (`OSError` for file-system failures).

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use scaleformer::data::{self, SamplePair, SceneSpec};
use scaleformer::metrics::{self, Metric};
use scaleformer::model::{ModelConfig, ModelParams};
use scaleformer::patchify::{self, PatchSequence};
use scaleformer::tiling::{self, Blend};
use scaleformer::training::{self, TrainConfig};
use scaleformer::{checkpoint, profile, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py_err(e: scaleformer::Error) -> PyErr {
    match e {
        scaleformer::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for scaleformer::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Deserialises keyword arguments through JSON so that Python sees exactly
/// the config-file schema (defaults, unknown keys rejected).
fn from_kwargs<T: DeserializeOwned + Default>(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(kwargs) = kwargs else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (kwargs,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

// ---- tensors -----------------------------------------------------------------

/// Dense float32 tensor.
#[pyclass(name = "Tensor", module = "scaleformer_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

fn wrap(inner: Tensor) -> PyTensor {
    PyTensor { inner }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(wrap(Tensor::new(shape, data).py()?))
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        wrap(Tensor::zeros(shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(wrap(self.inner.reshape(shape).py()?))
    }

    fn mean(&self) -> f32 {
        self.inner.mean()
    }

    fn max_abs_diff(&self, other: PyRef<'_, Self>) -> PyResult<f32> {
        self.inner.max_abs_diff(&other.inner).py()
    }

    fn bitwise_eq(&self, other: PyRef<'_, Self>) -> bool {
        self.inner.bitwise_eq(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

// ---- configs -----------------------------------------------------------------

/// Architecture hyperparameters; keyword arguments as in the JSON `model` section.
#[pyclass(name = "ModelConfig", module = "scaleformer_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner: ModelConfig = from_kwargs(py, kwargs)?;
        inner.validate().py()?;
        Ok(Self { inner })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

/// Optimisation hyperparameters; keyword arguments as in the JSON `train` section.
#[pyclass(name = "TrainConfig", module = "scaleformer_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner: TrainConfig = from_kwargs(py, kwargs)?;
        inner.validate().py()?;
        Ok(Self { inner })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

// ---- data --------------------------------------------------------------------

/// Registered PAN `[1,H,W]` / LRMS `[C,h,w]` pair with optional ground truth `[C,H,W]`.
#[pyclass(name = "SamplePair", module = "scaleformer_py", skip_from_py_object)]
#[derive(Clone)]
struct PySamplePair {
    inner: SamplePair,
}

#[pymethods]
impl PySamplePair {
    #[new]
    #[pyo3(signature = (pan, lrms, ratio, gt = None, id = "pair".to_string()))]
    fn new(pan: PyRef<'_, PyTensor>, lrms: PyRef<'_, PyTensor>, ratio: f64, gt: Option<PyRef<'_, PyTensor>>, id: String) -> PyResult<Self> {
        let inner = SamplePair { pan: pan.inner.clone(), lrms: lrms.inner.clone(), gt: gt.map(|g| g.inner.clone()), ratio, id };
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn pan(&self) -> PyTensor {
        wrap(self.inner.pan.clone())
    }

    #[getter]
    fn lrms(&self) -> PyTensor {
        wrap(self.inner.lrms.clone())
    }

    #[getter]
    fn gt(&self) -> Option<PyTensor> {
        self.inner.gt.clone().map(wrap)
    }

    #[getter]
    fn ratio(&self) -> f64 {
        self.inner.ratio
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    /// PAN-resolution `(H, W)`.
    #[getter]
    fn extent(&self) -> (usize, usize) {
        self.inner.extent()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.extent();
        format!("SamplePair(id={:?}, extent={h}x{w}, bands={}, ratio={})", self.inner.id, self.inner.bands(), self.inner.ratio)
    }
}

fn scene_spec(rho: f64, correlation_length: f64) -> SceneSpec {
    SceneSpec { rho, correlation_length, ..SceneSpec::default() }
}

/// Seeded synthetic multispectral scene `[bands, h, w]` in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (seed, bands, h, w, rho = 0.8, correlation_length = 4.0))]
fn synth_scene(seed: u64, bands: usize, h: usize, w: usize, rho: f64, correlation_length: f64) -> PyResult<PyTensor> {
    Ok(wrap(data::synth_scene(seed, bands, h, w, &scene_spec(rho, correlation_length)).py()?))
}

/// Wald-protocol degradation of a ground-truth scene into a training pair.
#[pyfunction]
fn wald_degrade(gt: PyRef<'_, PyTensor>, ratio: f64) -> PyResult<PySamplePair> {
    let bands = gt.inner.shape().first().copied().unwrap_or(0);
    Ok(PySamplePair { inner: data::wald_degrade(&gt.inner, ratio, &data::uniform_weights(bands)).py()? })
}

#[pyfunction]
#[pyo3(signature = (seed, scales, bands = 4, ratio = 2.0, count_per_scale = 2))]
fn make_multiscale_testset(seed: u64, scales: Vec<usize>, bands: usize, ratio: f64, count_per_scale: usize) -> PyResult<Vec<PySamplePair>> {
    let pairs = data::make_multiscale_testset(seed, &scales, bands, ratio, count_per_scale, &SceneSpec::default()).py()?;
    Ok(pairs.into_iter().map(|inner| PySamplePair { inner }).collect())
}

#[pyfunction]
fn read_raster(path: PathBuf) -> PyResult<PyTensor> {
    Ok(wrap(data::read_raster(&path).py()?))
}

#[pyfunction]
fn write_raster(path: PathBuf, img: PyRef<'_, PyTensor>) -> PyResult<()> {
    data::write_raster(&path, &img.inner).py()
}

// ---- tokenizer ---------------------------------------------------------------

/// Windows of a `[B,C,H,W]` image, `tokens` shaped `[B,T,C,p,p]`.
#[pyclass(name = "PatchSequence", module = "scaleformer_py")]
struct PyPatchSequence {
    inner: PatchSequence,
}

#[pymethods]
impl PyPatchSequence {
    #[getter]
    fn tokens(&self) -> PyTensor {
        wrap(self.inner.tokens.clone())
    }

    /// Inverse of `patchify`, cropping any padding.
    fn reassemble(&self) -> PyResult<PyTensor> {
        Ok(wrap(patchify::reassemble(&self.inner).py()?))
    }
}

/// Scale-aware patchify with zero padding to a multiple of `p`.
#[pyfunction]
fn patchify_image(x: PyRef<'_, PyTensor>, p: usize) -> PyResult<PyPatchSequence> {
    Ok(PyPatchSequence { inner: patchify::patchify_padded(&x.inner, p).py()? })
}

#[pyfunction]
fn bicubic_resize(x: PyRef<'_, PyTensor>, out_h: usize, out_w: usize) -> PyResult<PyTensor> {
    Ok(wrap(patchify::bicubic_resize(&x.inner, out_h, out_w).py()?))
}

/// RoPE rotation of `[..., L, D]` features at the given positions.
#[pyfunction]
#[pyo3(signature = (x, positions, base = 10_000.0))]
fn rope_rotate(x: PyRef<'_, PyTensor>, positions: Vec<usize>, base: f64) -> PyResult<PyTensor> {
    Ok(wrap(scaleformer::model::rope_rotate(&x.inner, &positions, base).py()?))
}

// ---- model -------------------------------------------------------------------

/// A ScaleFormer: config plus parameters.
#[pyclass(name = "Model", module = "scaleformer_py")]
struct PyModel {
    params: ModelParams,
    cfg: ModelConfig,
}

fn pairs_of(pairs: &[PyRef<'_, PySamplePair>]) -> Vec<SamplePair> {
    pairs.iter().map(|p| p.inner.clone()).collect()
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: PyRef<'_, PyModelConfig>, seed: u64) -> PyResult<Self> {
        Ok(Self { params: ModelParams::init(&config.inner, seed).py()?, cfg: config.inner.clone() })
    }

    /// Loads an SFCK checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, cfg) = checkpoint::load(&path).py()?;
        Ok(Self { params, cfg })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.params, &self.cfg).py()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.cfg.clone() }
    }

    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }

    fn parameter(&self, name: &str) -> PyResult<PyTensor> {
        Ok(wrap(self.params.get(name).py()?.clone()))
    }

    fn bitwise_eq(&self, other: PyRef<'_, Self>) -> bool {
        self.cfg == other.cfg && self.params.bitwise_eq(&other.params)
    }

    /// Full-image inference; returns the fused `[C,H,W]` image.
    #[pyo3(signature = (pair, window = 16))]
    fn infer(&self, py: Python<'_>, pair: PyRef<'_, PySamplePair>, window: usize) -> PyResult<PyTensor> {
        let pair = pair.inner.clone();
        py.detach(|| tiling::full_inference(&self.params, &self.cfg, &pair, window)).py().map(wrap)
    }

    /// Tiled inference with `blend` in {"hard", "feather"}.
    #[pyo3(signature = (pair, tile, overlap = 0, blend = "hard", window = 16))]
    fn infer_tiled(&self, py: Python<'_>, pair: PyRef<'_, PySamplePair>, tile: usize, overlap: usize, blend: &str, window: usize) -> PyResult<PyTensor> {
        let blend: Blend = blend.parse().py()?;
        let pair = pair.inner.clone();
        py.detach(|| tiling::tiled_inference(&self.params, &self.cfg, &pair, window, tile, overlap, blend)).py().map(wrap)
    }

    /// Trains in place; returns `{"step_losses", "epochs", "windows"}`.
    fn train<'py>(&mut self, py: Python<'py>, pairs: Vec<PyRef<'py, PySamplePair>>, config: PyRef<'py, PyTrainConfig>) -> PyResult<Bound<'py, PyDict>> {
        let data = pairs_of(&pairs);
        let tcfg = config.inner.clone();
        let (params, cfg) = (self.params.clone(), self.cfg.clone());
        let outcome = py.detach(move || training::train(params, &data, &tcfg, &cfg, |_| {})).py()?;
        let out = PyDict::new(py);
        out.set_item("step_losses", outcome.step_losses.clone())?;
        out.set_item("epochs", outcome.epochs.iter().map(|e| e.to_line()).collect::<Vec<_>>())?;
        out.set_item("windows", outcome.windows.clone())?;
        self.params = outcome.params;
        Ok(out)
    }
}

// ---- metrics -----------------------------------------------------------------

#[pyfunction]
#[pyo3(signature = (x, reference, data_range = 1.0))]
fn psnr(x: PyRef<'_, PyTensor>, reference: PyRef<'_, PyTensor>, data_range: f64) -> PyResult<f64> {
    metrics::psnr(&x.inner, &reference.inner, data_range).py()
}

#[pyfunction]
#[pyo3(signature = (x, reference, data_range = 1.0))]
fn ssim(x: PyRef<'_, PyTensor>, reference: PyRef<'_, PyTensor>, data_range: f64) -> PyResult<f64> {
    metrics::ssim(&x.inner, &reference.inner, data_range).py()
}

#[pyfunction]
fn sam(x: PyRef<'_, PyTensor>, reference: PyRef<'_, PyTensor>) -> PyResult<f64> {
    metrics::sam(&x.inner, &reference.inner).py()
}

#[pyfunction]
fn ergas(x: PyRef<'_, PyTensor>, reference: PyRef<'_, PyTensor>, ratio: f64) -> PyResult<f64> {
    metrics::ergas(&x.inner, &reference.inner, ratio).py()
}

#[pyfunction]
fn scc(x: PyRef<'_, PyTensor>, reference: PyRef<'_, PyTensor>) -> PyResult<f64> {
    metrics::scc(&x.inner, &reference.inner).py()
}

#[pyfunction]
fn q_index(x: PyRef<'_, PyTensor>, reference: PyRef<'_, PyTensor>) -> PyResult<f64> {
    metrics::q_index(&x.inner, &reference.inner).py()
}

/// All applicable metrics of one fused image, keyed by report column name.
#[pyfunction]
#[pyo3(signature = (fused, pair, data_range = 1.0))]
fn evaluate_image(fused: PyRef<'_, PyTensor>, pair: PyRef<'_, PySamplePair>, data_range: f64) -> PyResult<BTreeMap<String, f64>> {
    let p = &pair.inner;
    let m = metrics::evaluate_image(&p.id, &fused.inner, &p.lrms, &p.pan, p.gt.as_ref(), p.ratio, data_range).py()?;
    Ok(m.values.into_iter().map(|(k, v): (Metric, f64)| (k.name().to_string(), v)).collect())
}

#[pyfunction]
fn bicubic_baseline(pair: PyRef<'_, PySamplePair>) -> PyResult<PyTensor> {
    Ok(wrap(tiling::bicubic_baseline(&pair.inner).py()?))
}

#[pyfunction]
#[pyo3(signature = (img, tile, overlap = 0))]
fn seam_error(img: PyRef<'_, PyTensor>, tile: usize, overlap: usize) -> PyResult<f64> {
    tiling::seam_error(&img.inner, tile, overlap).py()
}

// ---- profile -----------------------------------------------------------------

/// Analytic MAC counts per stage (see the `profile` module for the convention).
#[pyfunction]
#[pyo3(signature = (config, h, w, ratio = 2.0, window = 16))]
fn flop_count<'py>(py: Python<'py>, config: PyRef<'py, PyModelConfig>, h: usize, w: usize, ratio: f64, window: usize) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &profile::flop_count(&config.inner, h, w, ratio, window).py()?)
}

#[pyfunction]
#[pyo3(signature = (config, h, w, ratio = 2.0, window = 16, batch = 1))]
fn memory_estimate<'py>(py: Python<'py>, config: PyRef<'py, PyModelConfig>, h: usize, w: usize, ratio: f64, window: usize, batch: usize) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &profile::memory_estimate(&config.inner, h, w, ratio, window, batch).py()?)
}

#[pymodule]
fn scaleformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PySamplePair>()?;
    m.add_class::<PyPatchSequence>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(wald_degrade, m)?)?;
    m.add_function(wrap_pyfunction!(make_multiscale_testset, m)?)?;
    m.add_function(wrap_pyfunction!(read_raster, m)?)?;
    m.add_function(wrap_pyfunction!(write_raster, m)?)?;
    m.add_function(wrap_pyfunction!(patchify_image, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_resize, m)?)?;
    m.add_function(wrap_pyfunction!(rope_rotate, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(sam, m)?)?;
    m.add_function(wrap_pyfunction!(ergas, m)?)?;
    m.add_function(wrap_pyfunction!(scc, m)?)?;
    m.add_function(wrap_pyfunction!(q_index, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_image, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(seam_error, m)?)?;
    m.add_function(wrap_pyfunction!(flop_count, m)?)?;
    m.add_function(wrap_pyfunction!(memory_estimate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
