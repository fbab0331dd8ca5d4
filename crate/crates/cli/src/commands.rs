use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpdr_core::bundle::{load_model, save_model};
use tpdr_core::checks::{gradcheck_component, Component};
use tpdr_core::config::{LedConfig, ModelConfig};
use tpdr_core::geometry::Camera;
use tpdr_core::image::Image;
use tpdr_core::metrics::MetricReport;
use tpdr_core::morphable::{FaceCoefficients, MorphableModel, ToyHeadSpec, TOY_SEED};
use tpdr_core::raster::render_secc;
use tpdr_core::renderer::{orbit_render, render_image, Conditioning, Model};
use tpdr_core::scene::{Scene, SceneKind, SceneSpec};
use tpdr_core::training::{log_csv, train_overfit, TrainConfig};
use tpdr_core::{Error, Tensor};

use crate::{Common, Kind};

pub enum Failure {
    Core(Error),
    Other { code: &'static str, message: String },
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Core(e.into())
    }
}

type Outcome = Result<(), Failure>;

/// Configuration file of `train`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))).into())
}

/// Names the file in IO errors raised by a core loader.
fn at<T>(path: &Path, r: tpdr_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Io(e) => Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))).into(),
        e => e.into(),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// A closed stdout (`| head`) is not an error.
fn print_json<T: Serialize>(value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::Io(e).into()),
        _ => Ok(()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn gen_scene(kind: Kind, out: &Path, common: &Common) -> Outcome {
    let mut spec = match &common.config {
        Some(p) => read_json::<SceneSpec>(p)?,
        None => SceneSpec::new(
            match kind {
                Kind::BlobField => SceneKind::BlobField,
                Kind::TexturedHead => SceneKind::TexturedHead,
            },
            0,
        ),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(r) = common.resolution {
        spec.width = r;
        spec.height = r;
    }
    if let Some(n) = common.samples_per_ray {
        spec.samples_per_ray = n;
    }
    if common.print_config {
        return print_json(&spec);
    }
    let scene = Scene::generate(&spec)?;
    scene.write(out)?;
    print_json(&serde_json::json!({ "out": out, "targets": scene.targets.len() }))
}

pub fn gen_model(out: &Path, seed: Option<u64>) -> Outcome {
    let model = ToyHeadSpec::default().build(seed.unwrap_or(TOY_SEED));
    std::fs::write(out, model.to_json()?)?;
    print_json(&serde_json::json!({
        "out": out,
        "vertices": model.num_vertices(),
        "triangles": model.triangles.len(),
    }))
}

/// Without a configuration file the model follows the scene's resolution
/// and depth range, and deforms when the scene has expressions.
fn resolve_run(scene: &Scene, common: &Common) -> Result<RunConfig, Failure> {
    let mut run = match &common.config {
        Some(p) => read_json::<RunConfig>(p)?,
        None => {
            let s = &scene.spec;
            RunConfig {
                model: ModelConfig {
                    width: s.width,
                    height: s.height,
                    samples_per_ray: s.samples_per_ray,
                    t_near: s.t_near,
                    t_far: s.t_far,
                    led: (s.kind == SceneKind::TexturedHead).then(LedConfig::default),
                    ..Default::default()
                },
                train: TrainConfig::default(),
            }
        }
    };
    if let Some(s) = common.seed {
        run.train.seed = s;
    }
    if let Some(r) = common.resolution {
        run.model.width = r;
        run.model.height = r;
    }
    if let Some(n) = common.samples_per_ray {
        run.model.samples_per_ray = n;
    }
    Ok(run)
}

pub fn train(scene_dir: &Path, out: &Path, common: &Common) -> Outcome {
    let scene = at(scene_dir, Scene::load(scene_dir))?;
    let run = resolve_run(&scene, common)?;
    if common.print_config {
        return print_json(&run);
    }
    let mut model = Model::init(run.model.clone(), run.train.seed)?;
    let report = train_overfit(&mut model, &scene, &run.train)?;
    save_model(&model, Some(&scene.spec), out)?;
    std::fs::write(with_suffix(out, ".log.csv"), log_csv(&report.log))?;
    print_json(&serde_json::json!({
        "checkpoint": out,
        "steps": report.log.len(),
        "final_loss": report.log.last().map(|r| r.loss),
        "evals": report.evals,
    }))
}

/// SECC pair for models with a deformation module, driven by the
/// expression in `coeffs` (neutral when absent).
fn conditioning_pair(model: &Model, spec: Option<&SceneSpec>, coeffs: Option<&Path>) -> Result<Option<Tensor>, Failure> {
    let Some(led) = &model.config.led else {
        return Ok(None);
    };
    let spec = spec.cloned().unwrap_or_else(|| SceneSpec::new(SceneKind::TexturedHead, 0));
    let face = spec.morphable();
    let z_exp = match coeffs {
        Some(p) => read_json::<FaceCoefficients>(p)?.z_exp,
        None => vec![0.0; face.expr_rank()],
    };
    let scene = Scene { spec, targets: Vec::new() };
    Ok(Some(scene.secc_pair(&z_exp, led.secc_size, model.config.width, model.config.height)?))
}

fn base_camera(model: &Model, spec: Option<&SceneSpec>) -> Camera {
    let (w, h) = (model.config.width, model.config.height);
    match spec {
        Some(s) => s.frontal_camera(w, h),
        None => Camera::frontal(w, h, 2.0, 1.0),
    }
}

/// Points the model's raster size at the camera's.
fn fit_to(model: &mut Model, camera: &Camera) {
    model.config.width = camera.width;
    model.config.height = camera.height;
}

pub fn render(
    checkpoint: &Path,
    out: &Path,
    camera: Option<&Path>,
    coeffs: Option<&Path>,
    alpha: Option<&Path>,
    resolution: Option<usize>,
) -> Outcome {
    let (mut model, spec) = at(checkpoint, load_model(checkpoint))?;
    let mut cam = match camera {
        Some(p) => read_json::<Camera>(p)?,
        None => base_camera(&model, spec.as_ref()),
    };
    if let Some(r) = resolution {
        cam = cam.resized(r, r);
    }
    fit_to(&mut model, &cam);
    let pair = conditioning_pair(&model, spec.as_ref(), coeffs)?;
    let img = render_image(&model, &cam, Conditioning { secc_pair: pair.as_ref(), source: None })?;
    img.rgb_image().save(out)?;
    if let Some(a) = alpha {
        img.alpha_image().save(a)?;
    }
    print_json(&serde_json::json!({ "out": out, "width": img.width, "height": img.height }))
}

#[derive(Serialize)]
struct OrbitFrame {
    image: String,
    yaw_deg: f64,
    pitch_deg: f64,
    /// Mean accumulated opacity.
    coverage: f64,
}

pub fn orbit(
    checkpoint: &Path,
    out: &Path,
    (yaw_min, yaw_max, steps): (f64, f64, usize),
    pitch: f64,
    coeffs: Option<&Path>,
    resolution: Option<usize>,
) -> Outcome {
    let (mut model, spec) = at(checkpoint, load_model(checkpoint))?;
    let mut base = base_camera(&model, spec.as_ref());
    if let Some(r) = resolution {
        base = base.resized(r, r);
    }
    fit_to(&mut model, &base);
    let yaws: Vec<f64> = match steps {
        0 => Vec::new(),
        1 => vec![yaw_min],
        n => (0..n).map(|i| yaw_min + (yaw_max - yaw_min) * i as f64 / (n - 1) as f64).collect(),
    };
    let pair = conditioning_pair(&model, spec.as_ref(), coeffs)?;
    let cond = Conditioning { secc_pair: pair.as_ref(), source: None };
    let radians: Vec<f64> = yaws.iter().map(|y| y.to_radians()).collect();
    let frames = orbit_render(&model, &base, &[0.0; 3], &radians, &vec![pitch.to_radians(); yaws.len()], cond)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = Vec::new();
    for (i, (f, yaw)) in frames.iter().zip(&yaws).enumerate() {
        let name = format!("frame_{i:03}.ppm");
        f.rgb_image().save(out.join(&name))?;
        manifest.push(OrbitFrame {
            image: name,
            yaw_deg: *yaw,
            pitch_deg: pitch,
            coverage: f.alpha.iter().sum::<f64>() / f.alpha.len() as f64,
        });
    }
    let body = serde_json::json!({ "frames": manifest });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&body)?)?;
    print_json(&serde_json::json!({ "out": out, "frames": frames.len() }))
}

pub fn secc(coeffs: &Path, out: &Path, model: Option<&Path>, resolution: usize) -> Outcome {
    let face = match model {
        Some(p) => MorphableModel::from_json(&read_text(p)?)?,
        None => MorphableModel::toy(),
    };
    let c: FaceCoefficients = read_json(coeffs)?;
    let img = render_secc(&face, &c, &Camera::frontal(resolution, resolution, 2.0, 1.0))?;
    img.to_image().save(out)?;
    print_json(&serde_json::json!({
        "out": out,
        "covered_pixels": img.mask.iter().filter(|&&m| m).count(),
    }))
}

pub fn gradcheck(component: &str, seed: u64) -> Outcome {
    let which: Vec<Component> = if component == "all" {
        Component::ALL.to_vec()
    } else {
        vec![component.parse()?]
    };
    let reports = which
        .into_iter()
        .map(|c| gradcheck_component(c, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = reports.iter().all(|r| r.passed);
    print_json(&serde_json::json!({ "passed": passed, "components": reports }))?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Other {
            code: "gradcheck_failed",
            message: "analytic and numeric gradients disagree".into(),
        })
    }
}

pub fn metrics(a: &Path, b: &Path, mask: Option<&Path>) -> Outcome {
    let (ia, ib) = (at(a, Image::load(a))?, at(b, Image::load(b))?);
    let mask = match mask {
        Some(p) => {
            let m = at(p, Image::load(p))?;
            if m.channels != 1 || (m.width, m.height) != (ia.width, ia.height) {
                return Err(Error::InvalidArgument("mask must be a single-channel image of the same size".into()).into());
            }
            m.data.iter().map(|&v| v > 0.5).collect()
        }
        None => vec![true; ia.width * ia.height],
    };
    print_json(&MetricReport::for_images(&ia, &ib, &mask)?)
}
