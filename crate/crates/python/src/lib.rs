//! Python bindings: datasets, simulation, reconstruction and metrics.
//!
//! Arrays cross the boundary as nested lists, complex values as Python
//! `complex`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ptychograd::config::RunConfig;
use ptychograd::dataset::{GroundTruth, PtychoDataset};
use ptychograd::error::PtychoError;
use ptychograd::metrics::{self, ConvergenceHistory};
use ptychograd::optics::{propagate_field, PropagationSpec};
use ptychograd::reconstruct::{self as recon, ReconstructionConfig, ReconstructionState};
use ptychograd::simulator::{simulate_recipe, SimulationRecipe};
use ptychograd::tensor::{ComplexTensor, RealImage};
use ptychograd::{io, num_complex::Complex64};

fn py_err(e: PtychoError) -> PyErr {
    let msg = format!("{}: {}", e.kind(), e);
    match e {
        PtychoError::Io { .. } => PyIOError::new_err(msg),
        PtychoError::Diverged { .. } | PtychoError::TapeConsumed => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn real_rows(img: &RealImage) -> Vec<Vec<f64>> {
    img.data.chunks(img.cols.max(1)).map(<[f64]>::to_vec).collect()
}

fn complex_rows(t: &ComplexTensor) -> Vec<Vec<Complex64>> {
    let (rows, cols) = t.shape();
    (0..rows).map(|r| (0..cols).map(|c| t.get(r, c)).collect()).collect()
}

fn tensor_from_rows(rows: Vec<Vec<Complex64>>) -> PyResult<ComplexTensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    let flat: Vec<Complex64> = rows.into_iter().flatten().collect();
    ComplexTensor::from_complex(flat.len() / cols.max(1), cols, &flat).map_err(py_err)
}

fn image_from_rows(rows: Vec<Vec<f64>>) -> PyResult<RealImage> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    let n = rows.len();
    RealImage::new(n, cols, rows.into_iter().flatten().collect()).map_err(py_err)
}

/// Diffraction patterns with their acquisition geometry.
#[pyclass(name = "Dataset", module = "pyptychograd")]
struct PyDataset {
    inner: PtychoDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_dataset(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn wavelength(&self) -> f64 {
        self.inner.wavelength
    }

    #[getter]
    fn distance(&self) -> f64 {
        self.inner.distance
    }

    #[getter]
    fn pixel_pitch(&self) -> f64 {
        self.inner.pixel_pitch
    }

    #[getter]
    fn pattern_shape(&self) -> (usize, usize) {
        self.inner.pattern_shape()
    }

    /// `(x, y)` in metres.
    #[getter]
    fn positions(&self) -> Vec<(f64, f64)> {
        self.inner.positions.clone()
    }

    fn frame(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .frames
            .get(index)
            .map(real_rows)
            .ok_or_else(|| PyValueError::new_err(format!("frame {index} out of range")))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} patterns of {:?}, z={:.4e} m)",
            self.inner.len(),
            self.inner.pattern_shape(),
            self.inner.distance
        )
    }
}

/// Parameters a synthetic dataset was generated with.
#[pyclass(name = "GroundTruth", module = "pyptychograd")]
struct PyTruth {
    inner: GroundTruth,
}

#[pymethods]
impl PyTruth {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_truth(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_truth(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn distance(&self) -> f64 {
        self.inner.distance
    }

    #[getter]
    fn positions_px(&self) -> Vec<(f64, f64)> {
        self.inner.positions_pixels()
    }

    #[getter]
    fn object(&self) -> Vec<Vec<Complex64>> {
        complex_rows(&self.inner.object)
    }

    fn probe(&self, mode: usize) -> PyResult<Vec<Vec<Complex64>>> {
        self.inner
            .probes
            .modes()
            .get(mode)
            .map(complex_rows)
            .ok_or_else(|| PyValueError::new_err(format!("probe mode {mode} out of range")))
    }
}

/// Final state and per-epoch history of a reconstruction.
#[pyclass(name = "Reconstruction", module = "pyptychograd")]
struct PyReconstruction {
    state: ReconstructionState,
    history: ConvergenceHistory,
}

#[pymethods]
impl PyReconstruction {
    #[staticmethod]
    fn load_snapshot(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: io::load_snapshot(&path).map_err(py_err)?,
            history: ConvergenceHistory::new(),
        })
    }

    fn save_snapshot(&self, path: PathBuf) -> PyResult<()> {
        io::save_snapshot(&self.state, &path).map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.state.epoch
    }

    #[getter]
    fn distance(&self) -> f64 {
        self.state.distance()
    }

    /// Estimated positions in pixels.
    #[getter]
    fn positions_px(&self) -> Vec<(f64, f64)> {
        self.state.estimated_positions()
    }

    #[getter]
    fn object(&self) -> Vec<Vec<Complex64>> {
        complex_rows(&self.state.object)
    }

    fn probe(&self, mode: usize) -> PyResult<Vec<Vec<Complex64>>> {
        self.state
            .probes
            .modes()
            .get(mode)
            .map(complex_rows)
            .ok_or_else(|| PyValueError::new_err(format!("probe mode {mode} out of range")))
    }

    /// `(epoch, total loss, z)` per completed epoch.
    #[getter]
    fn history(&self) -> Vec<(u64, f64, f64)> {
        self.history.records().iter().map(|r| (r.epoch, r.loss_total, r.z)).collect()
    }

    /// SSIM of magnitude and phase, distance error and position errors
    /// against ground truth.
    fn evaluate<'py>(&self, py: Python<'py>, truth: &PyTruth) -> PyResult<Bound<'py, PyDict>> {
        let t = &truth.inner;
        let roi = recon::comparison_roi(&self.state, t);
        let q = metrics::object_quality(&self.state.object, &t.object, roi).map_err(py_err)?;
        let est = self.state.estimated_positions();
        let pos = metrics::position_error_stats(&est, &t.positions_pixels()).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("ssim_magnitude", q.ssim_magnitude)?;
        d.set_item("ssim_phase", q.ssim_phase)?;
        d.set_item("z_rel_error", (self.state.distance() - t.distance) / t.distance)?;
        d.set_item("pos_err_median", pos.median)?;
        d.set_item("pos_err_max", pos.max)?;
        Ok(d)
    }
}

/// Default desk-scale simulation recipe as TOML.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn desk_scale_recipe(seed: u64) -> PyResult<String> {
    toml::to_string_pretty(&SimulationRecipe::desk_scale(seed)).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Synthesizes `(dataset, truth)` from a recipe TOML (the bare recipe or a
/// run config with a `[simulation]` table).
#[pyfunction]
fn simulate(py: Python<'_>, recipe: &str) -> PyResult<(PyDataset, PyTruth)> {
    let recipe = match SimulationRecipe::from_toml(recipe) {
        Ok(r) => r,
        Err(first) => RunConfig::from_toml(recipe)
            .ok()
            .and_then(|c| c.simulation)
            .ok_or_else(|| py_err(first))?,
    };
    let (dataset, truth) = py.detach(|| simulate_recipe(&recipe, None)).map_err(py_err)?;
    Ok((PyDataset { inner: dataset }, PyTruth { inner: truth }))
}

/// Runs a reconstruction. `config` is the `[reconstruction]` table (or a
/// run config) as TOML; defaults apply when omitted.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, truth=None))]
fn reconstruct(
    py: Python<'_>,
    dataset: &PyDataset,
    config: Option<&str>,
    truth: Option<&PyTruth>,
) -> PyResult<PyReconstruction> {
    let cfg = match config {
        None => ReconstructionConfig::default(),
        Some(text) => match toml::from_str::<ReconstructionConfig>(text) {
            Ok(c) => c,
            Err(_) => RunConfig::from_toml(text).map_err(py_err)?.reconstruction,
        },
    };
    let data = &dataset.inner;
    let truth = truth.map(|t| &t.inner);
    let (state, history) = py.detach(|| recon::reconstruct(data, &cfg, truth)).map_err(py_err)?;
    Ok(PyReconstruction { state, history })
}

/// Angular-spectrum propagation of a complex field by `distance` metres.
#[pyfunction]
fn propagate(field: Vec<Vec<Complex64>>, wavelength: f64, distance: f64, pixel_pitch: f64) -> PyResult<Vec<Vec<Complex64>>> {
    let t = tensor_from_rows(field)?;
    let spec = PropagationSpec::new(wavelength, distance, pixel_pitch);
    Ok(complex_rows(&propagate_field(&t, &spec).map_err(py_err)?))
}

/// Structural similarity of two equally sized real images.
#[pyfunction]
fn ssim(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::ssim(&image_from_rows(a)?, &image_from_rows(b)?).map_err(py_err)
}

#[pymodule]
fn pyptychograd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTruth>()?;
    m.add_class::<PyReconstruction>()?;
    m.add_function(wrap_pyfunction!(desk_scale_recipe, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    Ok(())
}
