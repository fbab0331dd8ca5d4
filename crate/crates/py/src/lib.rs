//! Python bindings. Structured values (configs, coefficients, reports)
//! cross the boundary as JSON strings; images as flat row-major lists.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use tpdr_core::bundle::{load_model, save_model};
use tpdr_core::checks::{gradcheck_component, Component};
use tpdr_core::config::ModelConfig;
use tpdr_core::geometry::Camera;
use tpdr_core::image::Image;
use tpdr_core::morphable::{FaceCoefficients, MorphableModel};
use tpdr_core::renderer::{render_image, Conditioning, Model};
use tpdr_core::scene::{Scene, SceneKind, SceneSpec};
use tpdr_core::training::{train_overfit, TrainConfig};
use tpdr_core::Error;

fn py_err(e: Error) -> PyErr {
    let text = format!("[{}] {e}", e.code());
    match e {
        Error::Io(_) => PyOSError::new_err(text),
        _ => PyValueError::new_err(text),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_str(s).map_err(|e| py_err(e.into()))
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| py_err(e.into()))
}

#[pyclass(name = "Camera", from_py_object)]
#[derive(Clone)]
struct PyCamera(Camera);

#[pymethods]
impl PyCamera {
    #[staticmethod]
    #[pyo3(signature = (width, height, distance = 2.0, focal_scale = 1.0))]
    fn frontal(width: usize, height: usize, distance: f64, focal_scale: f64) -> Self {
        PyCamera(Camera::frontal(width, height, distance, focal_scale))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyCamera(from_json(s)?))
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    /// Rotate about the origin; angles in radians.
    #[pyo3(signature = (yaw, pitch = 0.0))]
    fn orbit(&self, yaw: f64, pitch: f64) -> Self {
        PyCamera(self.0.orbit(yaw, pitch, &[0.0; 3]))
    }

    fn resized(&self, width: usize, height: usize) -> Self {
        PyCamera(self.0.resized(width, height))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }
}

#[pyclass(name = "FaceModel")]
struct PyFaceModel(MorphableModel);

#[pymethods]
impl PyFaceModel {
    #[staticmethod]
    fn toy() -> Self {
        PyFaceModel(MorphableModel::toy())
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        MorphableModel::from_json(s).map(PyFaceModel).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(py_err)
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.0.num_vertices()
    }

    #[getter]
    fn shape_rank(&self) -> usize {
        self.0.shape_rank()
    }

    #[getter]
    fn expr_rank(&self) -> usize {
        self.0.expr_rank()
    }

    /// Posed vertices for coefficients given as JSON.
    fn compute_vertices(&self, coeffs: &str) -> PyResult<Vec<[f64; 3]>> {
        let c: FaceCoefficients = from_json(coeffs)?;
        self.0.compute_vertices(&c).map_err(py_err)
    }

    /// Average vertex distance between two coefficient sets.
    fn avd(&self, a: &str, b: &str) -> PyResult<f64> {
        tpdr_core::metrics::avd(&self.0, &from_json(a)?, &from_json(b)?).map_err(py_err)
    }
}

#[pyclass(name = "Scene")]
struct PyScene(Scene);

#[pymethods]
impl PyScene {
    /// `kind` is "blob_field" or "textured_head"; `spec` is an optional JSON
    /// scene description that replaces both.
    #[staticmethod]
    #[pyo3(signature = (kind = "blob_field", seed = 0, resolution = None, spec = None))]
    fn generate(kind: &str, seed: u64, resolution: Option<usize>, spec: Option<&str>) -> PyResult<Self> {
        let mut s = match spec {
            Some(j) => from_json::<SceneSpec>(j)?,
            None => {
                let k: SceneKind = from_json(&format!("\"{kind}\""))?;
                SceneSpec::new(k, seed)
            }
        };
        if let Some(r) = resolution {
            s.width = r;
            s.height = r;
        }
        Scene::generate(&s).map(PyScene).map_err(py_err)
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Scene::load(dir).map(PyScene).map_err(py_err)
    }

    fn write(&self, dir: &str) -> PyResult<()> {
        self.0.write(dir).map_err(py_err)
    }

    fn spec_json(&self) -> PyResult<String> {
        to_json(&self.0.spec)
    }

    fn __len__(&self) -> usize {
        self.0.targets.len()
    }

    fn camera(&self, i: usize) -> PyResult<PyCamera> {
        self.0
            .targets
            .get(i)
            .map(|t| PyCamera(t.camera.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("no target {i}")))
    }

    /// Flat RGB of target `i`.
    fn target_rgb(&self, i: usize) -> PyResult<Vec<f64>> {
        self.0
            .targets
            .get(i)
            .map(|t| t.rgb.data.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no target {i}")))
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    model: Model,
    spec: Option<SceneSpec>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = match config {
            Some(j) => from_json(j)?,
            None => ModelConfig::default(),
        };
        Ok(PyModel { model: Model::init(cfg, seed).map_err(py_err)?, spec: None })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (model, spec) = load_model(path).map_err(py_err)?;
        Ok(PyModel { model, spec })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.model, self.spec.as_ref(), path).map_err(py_err)
    }

    fn config_json(&self) -> PyResult<String> {
        to_json(&self.model.config)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params.iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Fit to `scene`; returns the per-target evaluation as JSON.
    #[pyo3(signature = (scene, config = None))]
    fn train(&mut self, py: Python<'_>, scene: &PyScene, config: Option<&str>) -> PyResult<String> {
        let cfg: TrainConfig = match config {
            Some(j) => from_json(j)?,
            None => TrainConfig::default(),
        };
        let model = &mut self.model;
        let report = py.detach(|| train_overfit(model, &scene.0, &cfg)).map_err(py_err)?;
        self.spec = Some(scene.0.spec.clone());
        to_json(&serde_json::json!({
            "steps": report.log.len(),
            "final_loss": report.log.last().map(|r| r.loss),
            "evals": report.evals,
        }))
    }

    /// Returns `(rgb, alpha)` as flat lists. `z_exp` drives the deformation
    /// when the model has one; it defaults to the neutral expression.
    #[pyo3(signature = (camera, z_exp = None))]
    fn render(&self, py: Python<'_>, camera: &PyCamera, z_exp: Option<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let mut model = self.model.clone();
        model.config.width = camera.0.width;
        model.config.height = camera.0.height;
        let pair = match &model.config.led {
            Some(led) => {
                let spec = self.spec.clone().unwrap_or_else(|| SceneSpec::new(SceneKind::TexturedHead, 0));
                let z = z_exp.unwrap_or_else(|| vec![0.0; spec.morphable().expr_rank()]);
                let scene = Scene { spec, targets: Vec::new() };
                Some(scene.secc_pair(&z, led.secc_size, camera.0.width, camera.0.height).map_err(py_err)?)
            }
            None => None,
        };
        let img = py
            .detach(|| render_image(&model, &camera.0, Conditioning { secc_pair: pair.as_ref(), source: None }))
            .map_err(py_err)?;
        Ok((img.rgb, img.alpha))
    }
}

fn rgb(width: usize, height: usize, data: Vec<f64>) -> PyResult<Image> {
    Image::from_hwc(width, height, 3, data).map_err(py_err)
}

/// Masked PSNR and SSIM of two flat RGB images, as JSON.
#[pyfunction]
#[pyo3(signature = (a, b, width, height, mask = None))]
fn metrics(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize, mask: Option<Vec<bool>>) -> PyResult<String> {
    let mask = mask.unwrap_or_else(|| vec![true; width * height]);
    let report = tpdr_core::metrics::MetricReport::for_images(&rgb(width, height, a)?, &rgb(width, height, b)?, &mask)
        .map_err(py_err)?;
    to_json(&report)
}

/// Finite-difference gradient report for one component, as JSON.
#[pyfunction]
#[pyo3(signature = (component = "all", seed = 0))]
fn gradcheck(py: Python<'_>, component: &str, seed: u64) -> PyResult<String> {
    let c: Component = component.parse().map_err(py_err)?;
    let report = py.detach(|| gradcheck_component(c, seed)).map_err(py_err)?;
    to_json(&report)
}

#[pymodule]
fn tpdr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyFaceModel>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
