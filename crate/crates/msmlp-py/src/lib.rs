//! Python bindings: the dense tensor type, the mix-shift operator (both
//! routes), model building/inference/training, complexity counting, and the
//! gradient-check entry point.
//!
//! Build as a cdylib and import as `msmlp_py` (see `python/smoke_test.py`).

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msmlp::flops;
use msmlp::mixshift::{self, MixShiftParams, MixShiftSpec};
use msmlp::model::{Model, ModelSpec};
use msmlp::presets;
use msmlp::train;
use msmlp::Tensor4;

fn to_py_err(e: msmlp::Error) -> PyErr {
    match e {
        msmlp::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense `(n, h, w, c)` tensor of f64, row-major.
#[pyclass(name = "Tensor4", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor4 {
    inner: Tensor4,
}

#[pymethods]
impl PyTensor4 {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor4 {
            inner: Tensor4::from_vec(shape.0, shape.1, shape.2, shape.3, data).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        PyTensor4 {
            inner: Tensor4::zeros(shape.0, shape.1, shape.2, shape.3),
        }
    }

    /// Uniform random tensor in `[lo, hi)`, seeded.
    #[staticmethod]
    #[pyo3(signature = (shape, seed, lo=-1.0, hi=1.0))]
    fn random(shape: (usize, usize, usize, usize), seed: u64, lo: f64, hi: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PyTensor4 {
            inner: Tensor4::random(shape.0, shape.1, shape.2, shape.3, lo, hi, &mut rng),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        self.inner.shape()
    }

    /// Flat row-major data copy.
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn at(&self, n: usize, i: usize, j: usize, c: usize) -> f64 {
        self.inner.at(n, i, j, c)
    }

    fn max_abs_diff(&self, other: &PyTensor4) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        let (n, h, w, c) = self.inner.shape();
        format!("Tensor4(shape=({n}, {h}, {w}, {c}))")
    }
}

/// The regional token-mixing operator with bound parameters.
#[pyclass(name = "MixShift")]
struct PyMixShift {
    spec: MixShiftSpec,
    params: MixShiftParams,
}

#[pymethods]
impl PyMixShift {
    /// Randomly initialized operator for `channels`-wide feature maps.
    /// `spec_json` follows `{"S", "d", "r", "axis_mode", "conv_type", "projection"}`.
    #[new]
    fn new(spec_json: &str, channels: usize, seed: u64) -> PyResult<Self> {
        let spec = MixShiftSpec::from_json(spec_json).map_err(to_py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MixShiftParams::random(&spec, channels, 0.5, &mut rng).map_err(to_py_err)?;
        Ok(PyMixShift { spec, params })
    }

    /// Identity-behaving operator (delta kernels, identity projections).
    #[staticmethod]
    fn identity(spec_json: &str, channels: usize) -> PyResult<Self> {
        let spec = MixShiftSpec::from_json(spec_json).map_err(to_py_err)?;
        let params = MixShiftParams::identity(&spec, channels).map_err(to_py_err)?;
        Ok(PyMixShift { spec, params })
    }

    fn spec_json(&self) -> String {
        self.spec.to_json()
    }

    /// Operational forward route.
    fn forward(&self, x: &PyTensor4) -> PyResult<PyTensor4> {
        Ok(PyTensor4 {
            inner: mixshift::mix_shift_forward(&x.inner, &self.spec, &self.params).map_err(to_py_err)?,
        })
    }

    /// Naive per-token reference route (the verification oracle).
    fn reference(&self, x: &PyTensor4) -> PyResult<PyTensor4> {
        Ok(PyTensor4 {
            inner: mixshift::mix_shift_reference_forward(&x.inner, &self.spec, &self.params).map_err(to_py_err)?,
        })
    }
}

/// A built model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_preset(name: &str, seed: u64) -> PyResult<Self> {
        let spec = presets::preset(name).map_err(to_py_err)?;
        Ok(PyModel {
            inner: Model::build(&spec, seed).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn from_spec_json(json: &str, seed: u64) -> PyResult<Self> {
        let spec = ModelSpec::from_json(json).map_err(to_py_err)?;
        Ok(PyModel {
            inner: Model::build(&spec, seed).map_err(to_py_err)?,
        })
    }

    fn spec_json(&self) -> String {
        self.inner.spec.to_json()
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    /// Eval-mode forward; returns logits with shape `(n, 1, 1, classes)`.
    fn forward(&self, images: &PyTensor4) -> PyResult<PyTensor4> {
        Ok(PyTensor4 {
            inner: self.inner.forward(&images.inner).map_err(to_py_err)?,
        })
    }

    /// Eval-mode forward returning logits as one row per image.
    fn logits(&self, images: &PyTensor4) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.forward(&images.inner).map_err(to_py_err)?;
        Ok(out.rows().into_iter().map(<[f64]>::to_vec).collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        msmlp::checkpoint::save_model_to_path(&self.inner, std::path::Path::new(path)).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: msmlp::checkpoint::load_model_from_path(std::path::Path::new(path)).map_err(to_py_err)?,
        })
    }

    /// Train in place on the synthetic square-texture task; returns
    /// `(per-step losses, final train accuracy)`.
    #[pyo3(signature = (steps, seed=0, lr=1e-3, samples=64))]
    fn train_synthetic(&mut self, steps: usize, seed: u64, lr: f64, samples: usize) -> PyResult<(Vec<f64>, f64)> {
        let task = train::SyntheticTask {
            image_size: self.inner.spec.image_size,
            num_classes: self.inner.spec.num_classes,
            seed,
            samples,
        };
        let data = train::make_synthetic_task(&task).map_err(to_py_err)?;
        let cfg = train::TrainConfig {
            steps,
            lr,
            seed,
            ..Default::default()
        };
        let history = train::train_loop(&mut self.inner, &data, &cfg).map_err(to_py_err)?;
        Ok((
            history.steps.iter().map(|s| s.loss).collect(),
            history.final_train_accuracy,
        ))
    }
}

#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    presets::PRESET_NAMES.to_vec()
}

#[pyfunction]
fn preset_json(name: &str) -> PyResult<String> {
    Ok(presets::preset(name).map_err(to_py_err)?.to_json())
}

/// `(total_macs, total_params)` for a model spec JSON at an image size.
#[pyfunction]
fn count_flops_total(spec_json: &str, image_size: usize) -> PyResult<(u64, u64)> {
    let spec = ModelSpec::from_json(spec_json).map_err(to_py_err)?;
    let report = flops::count_flops(&spec, image_size).map_err(to_py_err)?;
    Ok((report.total_macs, report.total_params))
}

#[pyfunction]
fn count_params_total(spec_json: &str) -> PyResult<u64> {
    let spec = ModelSpec::from_json(spec_json).map_err(to_py_err)?;
    Ok(flops::count_params(&spec).map_err(to_py_err)?.total_params)
}

/// Closed-form complexity of a token-interaction method
/// (`msa`, `w-msa`, `f-msa`, `global-mix`, `axial-shift`, `mix-shift`).
#[pyfunction]
#[pyo3(signature = (method, h=None, w=None, c=None, m=None, s=None, r=None))]
#[allow(clippy::too_many_arguments)]
fn complexity_formula(
    method: &str,
    h: Option<u64>,
    w: Option<u64>,
    c: Option<u64>,
    m: Option<u64>,
    s: Option<u64>,
    r: Option<Vec<u64>>,
) -> PyResult<u128> {
    let q = flops::ComplexityQuery {
        method: Some(flops::Method::parse(method).map_err(to_py_err)?),
        h,
        w,
        c,
        m,
        s,
        r,
    };
    flops::complexity_formula(&q).map_err(to_py_err)
}

/// Worst relative error of one primitive gradient-check sweep.
#[pyfunction]
fn gradcheck_primitives(seed: u64) -> PyResult<f64> {
    msmlp::gradcheck::check_primitive_gradients(seed).map_err(to_py_err)
}

/// Exact-erf GeLU of a scalar.
#[pyfunction]
fn gelu(x: f64) -> f64 {
    msmlp::ops::gelu_scalar(x)
}

#[pymodule]
fn msmlp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor4>()?;
    m.add_class::<PyMixShift>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(preset_json, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops_total, m)?)?;
    m.add_function(wrap_pyfunction!(count_params_total, m)?)?;
    m.add_function(wrap_pyfunction!(complexity_formula, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_primitives, m)?)?;
    m.add_function(wrap_pyfunction!(gelu, m)?)?;
    Ok(())
}
