//! Python bindings. Volumes cross the boundary as flat x-fastest lists of
//! floats plus a `(nx, ny, nz)` tuple; vector fields are channel-major.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use svfreg::diffeo::{self, Direction};
use svfreg::engine::{self, AdaptConfig, TrainConfig};
use svfreg::eval::{self, BinaryMask};
use svfreg::grid::{self, Dims, Geometry, Spacing};
use svfreg::objective::LossSettings;
use svfreg::phantom::{self, Deformation};
use svfreg::predictor::{Architecture, PredictorParams};
use svfreg::uncertainty::{self, ChannelAggregation};

fn py_err(e: svfreg::Error) -> PyErr {
    match e {
        svfreg::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn direction(s: &str) -> PyResult<Direction> {
    s.parse().map_err(py_err)
}

#[pyclass(name = "ScalarVolume", module = "svfreg_py", from_py_object)]
#[derive(Clone)]
struct PyScalarVolume {
    inner: grid::ScalarVolume,
}

#[pymethods]
impl PyScalarVolume {
    #[new]
    #[pyo3(signature = (dims, data, spacing = (1.0, 1.0, 1.0)))]
    fn new(dims: (usize, usize, usize), data: Vec<f64>, spacing: (f64, f64, f64)) -> PyResult<Self> {
        let geom = Geometry::new([dims.0, dims.1, dims.2], [spacing.0, spacing.1, spacing.2]).map_err(py_err)?;
        let inner = grid::ScalarVolume::new(geom, data).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> Spacing {
        self.inner.spacing()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("ScalarVolume(dims={:?}, spacing={:?})", self.inner.dims(), self.inner.spacing())
    }
}

#[pyclass(name = "VectorField", module = "svfreg_py", from_py_object)]
#[derive(Clone)]
struct PyVectorField {
    inner: grid::VectorField,
}

#[pymethods]
impl PyVectorField {
    #[new]
    #[pyo3(signature = (dims, data, spacing = (1.0, 1.0, 1.0)))]
    fn new(dims: (usize, usize, usize), data: Vec<f64>, spacing: (f64, f64, f64)) -> PyResult<Self> {
        let geom = Geometry::new([dims.0, dims.1, dims.2], [spacing.0, spacing.1, spacing.2]).map_err(py_err)?;
        let inner = grid::VectorField::new(geom, data).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Uniform field `c` in voxel units.
    #[staticmethod]
    fn constant(dims: (usize, usize, usize), c: (f64, f64, f64)) -> PyResult<Self> {
        let geom = Geometry::cube([dims.0, dims.1, dims.2]).map_err(py_err)?;
        Ok(Self {
            inner: grid::VectorField::constant(geom, [c.0, c.1, c.2]),
        })
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn max_magnitude(&self) -> f64 {
        self.inner.max_magnitude()
    }

    fn __neg__(&self) -> Self {
        Self { inner: self.inner.neg() }
    }

    fn __repr__(&self) -> String {
        format!("VectorField(dims={:?})", self.inner.dims())
    }
}

/// Predictor parameters.
#[pyclass(name = "Predictor", module = "svfreg_py", from_py_object)]
#[derive(Clone)]
struct PyPredictor {
    inner: PredictorParams,
}

#[pymethods]
impl PyPredictor {
    #[new]
    #[pyo3(signature = (seed = 0, dropout = 0.2))]
    fn new(seed: u64, dropout: f64) -> PyResult<Self> {
        let inner = PredictorParams::init(Architecture::default(), dropout, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: svfreg::io::read_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        svfreg::io::write_checkpoint(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn dropout(&self) -> f64 {
        self.inner.dropout()
    }

    /// Deterministic inference: `(displacement, warped)`.
    #[pyo3(signature = (fixed, moving, direction = "fwd", steps = 10))]
    fn register(
        &self,
        fixed: &PyScalarVolume,
        moving: &PyScalarVolume,
        direction: &str,
        steps: u32,
    ) -> PyResult<(PyVectorField, PyScalarVolume)> {
        let dir = self::direction(direction)?;
        let (u, warped) = engine::register(&self.inner, &fixed.inner, &moving.inner, dir, steps).map_err(py_err)?;
        Ok((PyVectorField { inner: u.into_field() }, PyScalarVolume { inner: warped }))
    }

    /// Pretrain on `(fixed, moving)` pairs; returns the trained predictor and
    /// the per-epoch losses.
    #[pyo3(signature = (pairs, epochs = 10, lr = 2e-4, lam = 0.2, seed = 0))]
    fn pretrain(
        &self,
        pairs: Vec<(PyScalarVolume, PyScalarVolume)>,
        epochs: usize,
        lr: f64,
        lam: f64,
        seed: u64,
    ) -> PyResult<(PyPredictor, Vec<f64>)> {
        let dataset: Vec<engine::Pair> = pairs.into_iter().map(|(f, m)| (f.inner, m.inner)).collect();
        let cfg = TrainConfig {
            epochs,
            lr,
            loss: LossSettings {
                lambda: lam,
                ..LossSettings::default()
            },
            seed,
        };
        let (inner, report) = engine::pretrain(&self.inner, &dataset, &cfg).map_err(py_err)?;
        Ok((PyPredictor { inner }, report.epoch_losses))
    }

    /// Uncertainty-weighted test-time adaptation. Returns the adapted
    /// predictor and the report as a JSON string.
    #[pyo3(signature = (
        fixed, moving, steps = 30, mc_samples = 20, lr = 2e-4, lam = 0.2,
        dropout = 0.2, epsilon = 1e-6, direction = "fwd", seed = 0, aggregation = "sum"
    ))]
    #[allow(clippy::too_many_arguments)]
    fn adapt(
        &self,
        fixed: &PyScalarVolume,
        moving: &PyScalarVolume,
        steps: usize,
        mc_samples: usize,
        lr: f64,
        lam: f64,
        dropout: f64,
        epsilon: f64,
        direction: &str,
        seed: u64,
        aggregation: &str,
    ) -> PyResult<(PyPredictor, String)> {
        let cfg = AdaptConfig {
            lambda: lam,
            mc_samples,
            adapt_steps: steps,
            lr,
            dropout,
            epsilon,
            direction: self::direction(direction)?,
            seed,
            aggregation: aggregation.parse::<ChannelAggregation>().map_err(py_err)?,
            ..AdaptConfig::default()
        };
        let (inner, report) = engine::adapt(&self.inner, &fixed.inner, &moving.inner, &cfg).map_err(py_err)?;
        let json = serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok((PyPredictor { inner }, json))
    }

    /// MC-dropout variance (coarse grid) and the normalized weight map
    /// (image grid).
    #[pyo3(signature = (fixed, moving, samples = 20, seed = 0, epsilon = 1e-6))]
    fn uncertainty(
        &self,
        fixed: &PyScalarVolume,
        moving: &PyScalarVolume,
        samples: usize,
        seed: u64,
        epsilon: f64,
    ) -> PyResult<(PyScalarVolume, PyScalarVolume)> {
        let map = uncertainty::uncertainty_map(
            &self.inner,
            &fixed.inner,
            &moving.inner,
            samples,
            seed,
            epsilon,
            ChannelAggregation::Sum,
        )
        .map_err(py_err)?;
        Ok((PyScalarVolume { inner: map.variance }, PyScalarVolume { inner: map.weights }))
    }
}

/// Scaling and squaring of a velocity field into a displacement field.
#[pyfunction]
#[pyo3(signature = (v, steps = 10))]
fn integrate_svf(v: &PyVectorField, steps: u32) -> PyResult<PyVectorField> {
    let (u, _) = diffeo::integrate_svf(&v.inner, steps).map_err(py_err)?;
    Ok(PyVectorField { inner: u.into_field() })
}

#[pyfunction]
fn warp(img: &PyScalarVolume, u: &PyVectorField) -> PyResult<PyScalarVolume> {
    let u = diffeo::DisplacementField::new(u.inner.clone(), Direction::Forward, 0).map_err(py_err)?;
    Ok(PyScalarVolume {
        inner: diffeo::warp(&img.inner, &u).map_err(py_err)?,
    })
}

/// Compose two displacement fields: `(a ∘ b)(x) = b(x) + a(x + b(x))`.
#[pyfunction]
fn compose(a: &PyVectorField, b: &PyVectorField) -> PyResult<PyVectorField> {
    let a = diffeo::DisplacementField::new(a.inner.clone(), Direction::Forward, 0).map_err(py_err)?;
    let b = diffeo::DisplacementField::new(b.inner.clone(), Direction::Forward, 0).map_err(py_err)?;
    Ok(PyVectorField {
        inner: diffeo::compose(&a, &b).map_err(py_err)?.into_field(),
    })
}

#[pyfunction]
fn jacobian_determinant(u: &PyVectorField) -> PyResult<PyScalarVolume> {
    let u = diffeo::DisplacementField::new(u.inner.clone(), Direction::Forward, 0).map_err(py_err)?;
    Ok(PyScalarVolume {
        inner: diffeo::jacobian_determinant(&u).map_err(py_err)?,
    })
}

#[pyfunction]
fn dice(a: &PyScalarVolume, b: &PyScalarVolume) -> PyResult<f64> {
    eval::dice(&BinaryMask::threshold(&a.inner, 0.5), &BinaryMask::threshold(&b.inner, 0.5)).map_err(py_err)
}

/// Average symmetric surface distance in mm.
#[pyfunction]
fn assd(a: &PyScalarVolume, b: &PyScalarVolume) -> PyResult<f64> {
    eval::assd(&BinaryMask::threshold(&a.inner, 0.5), &BinaryMask::threshold(&b.inner, 0.5)).map_err(py_err)
}

/// A phantom pair as a dict with `fixed`, `moving`, `fixed_mask`,
/// `moving_mask`, `v_gt` and `delta_v_analog`.
#[pyfunction]
#[pyo3(signature = (dims = 32, radial_scale = 0.8, amplitude = 1.0, seed = 0))]
fn make_phantom(py: Python<'_>, dims: usize, radial_scale: f64, amplitude: f64, seed: u64) -> PyResult<Py<PyAny>> {
    let deformation = Deformation {
        radial_scale,
        random_amplitude: amplitude,
        ..Deformation::default()
    };
    let case = phantom::make_phantom_pair([dims; 3], deformation, seed).map_err(py_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("fixed", PyScalarVolume { inner: case.fixed })?;
    d.set_item("moving", PyScalarVolume { inner: case.moving })?;
    d.set_item("fixed_mask", PyScalarVolume { inner: case.fixed_mask.into_volume() })?;
    d.set_item("moving_mask", PyScalarVolume { inner: case.moving_mask.into_volume() })?;
    d.set_item("v_gt", PyVectorField { inner: case.v_gt })?;
    d.set_item("delta_v_analog", case.delta_v_analog)?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
fn write_volume(path: &str, vol: &PyScalarVolume) -> PyResult<()> {
    svfreg::io::write_scalar(path, &vol.inner).map_err(py_err)
}

#[pyfunction]
fn read_volume(path: &str) -> PyResult<PyScalarVolume> {
    Ok(PyScalarVolume {
        inner: svfreg::io::read_scalar(path).map_err(py_err)?,
    })
}

#[pymodule]
pub fn svfreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScalarVolume>()?;
    m.add_class::<PyVectorField>()?;
    m.add_class::<PyPredictor>()?;
    m.add_function(wrap_pyfunction!(integrate_svf, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(jacobian_determinant, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(assd, m)?)?;
    m.add_function(wrap_pyfunction!(make_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    Ok(())
}
