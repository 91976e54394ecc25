//! Python bindings: configuration, datasets, training, evaluation, rendering and gradient checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dynsplat::config::TrainConfig as CoreConfig;
use dynsplat::gradcheck::{grad_check as core_grad_check, Component};
use dynsplat::img::Image;
use dynsplat::metrics;
use dynsplat::sampling::Dataset as CoreDataset;
use dynsplat::synth::{generate_scene, write_dataset, InitNoise, Preset, RigConfig};
use dynsplat::trainer::Trainer as CoreTrainer;
use dynsplat::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Contract(_) | Error::ParameterDomain(_) | Error::Format { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Training configuration (`key = value` text over the desk or full profile).
#[pyclass(name = "TrainConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::parse(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::load(&path).map_err(to_py)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut c = self.inner.clone();
        c.set(key, value).map_err(to_py)?;
        c.validate().map_err(to_py)?;
        self.inner = c;
        Ok(())
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v).ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash(&self) -> String {
        self.inner.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(profile={}, main_iters={}, nodes={})", self.inner.profile.name(), self.inner.main_iters, self.inner.nodes)
    }
}

/// A dataset directory (manifest plus frames) loaded into memory.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreDataset::load(&path).map_err(to_py)? })
    }

    fn views(&self) -> Vec<String> {
        self.inner.manifest.views.iter().map(|v| v.camera.id.clone()).collect()
    }

    fn frame_count(&self) -> usize {
        self.inner.manifest.frame_count
    }

    fn resolution(&self) -> (usize, usize) {
        (self.inner.manifest.resolution[0], self.inner.manifest.resolution[1])
    }

    /// Ground-truth frame as a flat row-major RGB list.
    fn frame(&self, view: &str, index: usize) -> PyResult<Vec<f64>> {
        let v = self.inner.manifest.view_index(view).ok_or_else(|| PyValueError::new_err(format!("no view {view:?}")))?;
        self.inner.images[v].get(index).map(|i| i.data.clone()).ok_or_else(|| PyValueError::new_err("frame index out of range"))
    }
}

fn record_dict<'py>(py: Python<'py>, r: &dynsplat::trainer::LogRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("stage", r.stage.name())?;
    d.set_item("iteration", r.iteration)?;
    d.set_item("loss", r.loss)?;
    d.set_item("l_frame", r.l_frame)?;
    d.set_item("l_motion", r.l_motion)?;
    d.set_item("nodes", r.nodes)?;
    d.set_item("skipped", r.skipped)?;
    Ok(d)
}

/// Two-stage trainer; also the handle for evaluation and rendering of a checkpoint.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: CoreTrainer,
}

impl PyTrainer {
    fn ready_model(&mut self) -> PyResult<&dynsplat::model::Model> {
        if !self.inner.nodes_initialized() {
            return Err(PyValueError::new_err("control nodes are placed at the end of the warm-up stage"));
        }
        if self.inner.model.skin.is_none() {
            let epoch = self.inner.main_done as u64;
            self.inner.model.rebuild_skinning(epoch).map_err(to_py)?;
        }
        Ok(&self.inner.model)
    }
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig, dataset: &PyDataset) -> PyResult<Self> {
        Ok(Self { inner: CoreTrainer::new(config.inner.clone(), &dataset.inner).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: dynsplat::checkpoint::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dynsplat::checkpoint::save(&self.inner, &path).map_err(to_py)
    }

    /// Runs one iteration; returns its log record, or None when training is complete.
    fn step<'py>(&mut self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Option<Bound<'py, PyDict>>> {
        match self.inner.step(&dataset.inner).map_err(to_py)? {
            Some(r) => Ok(Some(record_dict(py, &r)?)),
            None => Ok(None),
        }
    }

    /// Runs up to `iterations` more iterations (all remaining when omitted).
    #[pyo3(signature = (dataset, iterations = None))]
    fn run(&mut self, dataset: &PyDataset, iterations: Option<usize>) -> PyResult<usize> {
        let before = self.inner.history.len();
        self.inner.run(&dataset.inner, iterations, |_, _| Ok(())).map_err(to_py)?;
        Ok(self.inner.history.len() - before)
    }

    #[getter]
    fn warmup_done(&self) -> usize {
        self.inner.warmup_done
    }

    #[getter]
    fn main_done(&self) -> usize {
        self.inner.main_done
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.model.nodes.len()
    }

    #[getter]
    fn gaussian_count(&self) -> usize {
        self.inner.model.cloud.len()
    }

    fn finished(&self) -> bool {
        self.inner.finished()
    }

    fn losses(&self) -> Vec<f64> {
        self.inner.history.iter().map(|r| r.loss).collect()
    }

    /// Metrics on every frame of one dataset view via the windowed inference path.
    fn evaluate<'py>(&mut self, py: Python<'py>, dataset: &PyDataset, view: &str) -> PyResult<Bound<'py, PyDict>> {
        let data = &dataset.inner;
        let v = data.manifest.view_index(view).ok_or_else(|| PyValueError::new_err(format!("no view {view:?}")))?;
        let window = self.inner.config.window();
        let model = self.ready_model()?;
        let rec = &data.manifest.views[v];
        let times: Vec<f64> = rec.frames.iter().map(|f| f.time).collect();
        let r = metrics::eval_sequence(model, &rec.camera, &times, &data.images[v], window).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("psnr", r.psnr)?;
        d.set_item("ssim", r.ssim)?;
        d.set_item("tpsnr", r.tpsnr)?;
        d.set_item("network_forwards", r.network_forwards)?;
        d.set_item("render_fps", r.render_fps)?;
        d.set_item("per_frame_psnr", r.frames.iter().map(|f| f.psnr).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Renders the given normalized times from a stored camera; one flat RGB list per frame.
    fn render(&mut self, camera: &str, times: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let cam = self.inner.cameras.iter().find(|c| c.id == camera).cloned().ok_or_else(|| PyValueError::new_err(format!("no camera {camera:?}")))?;
        let window = self.inner.config.window();
        let model = self.ready_model()?;
        let frames = model.render_sequence(&cam, &times, window).map_err(to_py)?;
        Ok(frames.into_iter().map(|i| i.data).collect())
    }
}

/// Writes a synthetic dataset and returns the number of views.
#[pyfunction]
#[pyo3(signature = (preset, outdir, seed = 0, frames = 30, resolution = 64))]
fn synth(preset: &str, outdir: PathBuf, seed: u64, frames: usize, resolution: usize) -> PyResult<usize> {
    let preset: Preset = preset.parse().map_err(to_py)?;
    let base = RigConfig::default();
    let focal = base.focal * resolution as f64 / base.resolution[0] as f64;
    let rig = RigConfig { resolution: [resolution, resolution], focal, frame_count: frames, ..base };
    let script = generate_scene(preset, seed, &rig).map_err(to_py)?;
    let m = write_dataset(&script, &outdir, seed, &InitNoise::default()).map_err(to_py)?;
    Ok(m.views.len())
}

/// Finite-difference gradient check; returns (passed, max relative error, entries checked).
#[pyfunction]
#[pyo3(signature = (component, seeds = 20, first_seed = 0))]
fn grad_check(component: &str, seeds: u64, first_seed: u64) -> PyResult<(bool, f64, usize)> {
    let c: Component = component.parse().map_err(to_py)?;
    let r = core_grad_check(c, first_seed, seeds).map_err(to_py)?;
    Ok((r.passed(), r.max_rel_error, r.checked))
}

fn image(data: Vec<f64>, width: usize, height: usize) -> PyResult<Image> {
    Image::from_data(width, height, data).map_err(to_py)
}

/// PSNR of two flat RGB images (capped at 99 dB).
#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    metrics::psnr(&image(a, width, height)?, &image(b, width, height)?).map_err(to_py)
}

#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    metrics::ssim(&image(a, width, height)?, &image(b, width, height)?).map_err(to_py)
}

#[pymodule]
fn pydynsplat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add("PSNR_CAP", metrics::PSNR_CAP)?;
    Ok(())
}
