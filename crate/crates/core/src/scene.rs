//! Synthetic training scenes and their on-disk layout.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Camera};
use crate::image::Image;
use crate::math::{self, Vec3};
use crate::morphable::{self, FaceCoefficients, MorphableModel, ToyHeadSpec};
use crate::raster;
use crate::renderer;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// A few coloured Gaussian density blobs, rendered with the model's own
    /// quadrature.
    BlobField,
    /// The toy head rasterized with a painted vertex texture.
    TexturedHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_res")]
    pub width: usize,
    #[serde(default = "default_res")]
    pub height: usize,
    #[serde(default = "default_samples")]
    pub samples_per_ray: usize,
    #[serde(default = "default_near")]
    pub t_near: f64,
    #[serde(default = "default_far")]
    pub t_far: f64,
    #[serde(default = "default_distance")]
    pub camera_distance: f64,
    #[serde(default = "default_focal")]
    pub focal_scale: f64,
    /// Camera yaw angles in degrees about the origin. Heads default to a
    /// near-frontal pair, where the frontal SECC lines up with the view.
    #[serde(default)]
    pub yaws_deg: Option<Vec<f64>>,
    /// Driving expressions for the textured head; default neutral and the
    /// mouth-opening axis.
    #[serde(default)]
    pub expressions: Option<Vec<Vec<f64>>>,
    /// Source identity of the textured head.
    #[serde(default)]
    pub z_shp: Option<Vec<f64>>,
    #[serde(default = "default_morph_seed")]
    pub morphable_seed: u64,
    /// Per-axis supersampling of the rasterized head.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
}

fn default_res() -> usize {
    32
}
fn default_samples() -> usize {
    32
}
fn default_near() -> f64 {
    0.5
}
fn default_far() -> f64 {
    3.5
}
fn default_distance() -> f64 {
    2.0
}
fn default_focal() -> f64 {
    1.0
}
fn default_morph_seed() -> u64 {
    morphable::TOY_SEED
}
fn default_supersample() -> usize {
    4
}
fn default_blobs() -> usize {
    4
}

impl SceneSpec {
    pub fn new(kind: SceneKind, seed: u64) -> Self {
        SceneSpec {
            kind,
            seed,
            width: default_res(),
            height: default_res(),
            samples_per_ray: default_samples(),
            t_near: default_near(),
            t_far: default_far(),
            camera_distance: default_distance(),
            focal_scale: default_focal(),
            yaws_deg: None,
            expressions: None,
            z_shp: None,
            morphable_seed: default_morph_seed(),
            supersample: default_supersample(),
            blobs: default_blobs(),
        }
    }

    pub fn yaws(&self) -> Vec<f64> {
        self.yaws_deg.clone().unwrap_or_else(|| match self.kind {
            SceneKind::BlobField => vec![0.0],
            SceneKind::TexturedHead => vec![0.0, 10.0],
        })
    }

    pub fn frontal_camera(&self, width: usize, height: usize) -> Camera {
        Camera::frontal(self.width, self.height, self.camera_distance, self.focal_scale).resized(width, height)
    }

    pub fn cameras(&self) -> Vec<Camera> {
        let base = self.frontal_camera(self.width, self.height);
        self.yaws().iter().map(|y| base.orbit(y.to_radians(), 0.0, &[0.0; 3])).collect()
    }

    pub fn morphable(&self) -> MorphableModel {
        ToyHeadSpec::default().build(self.morphable_seed)
    }

    pub fn expressions(&self, model: &MorphableModel) -> Vec<Vec<f64>> {
        self.expressions.clone().unwrap_or_else(|| {
            let k = model.expr_rank();
            let mut open = vec![0.0; k];
            open[0] = 1.0;
            vec![vec![0.0; k], open]
        })
    }

    pub fn source_shape(&self, model: &MorphableModel) -> Vec<f64> {
        self.z_shp.clone().unwrap_or_else(|| vec![0.0; model.shape_rank()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.samples_per_ray < 2 || self.supersample == 0 {
            return Err(Error::InvalidArgument("scene resolution, samples and supersampling must be positive".into()));
        }
        if !(self.t_near > 0.0 && self.t_near < self.t_far) || self.camera_distance <= 0.0 || self.focal_scale <= 0.0 {
            return Err(Error::InvalidArgument("scene depth range and camera rig must be positive".into()));
        }
        if self.yaws().is_empty() {
            return Err(Error::InvalidArgument("a scene needs at least one camera".into()));
        }
        Ok(())
    }
}

/// One supervised view.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub camera: Camera,
    pub rgb: Image,
    pub alpha: Vec<f64>,
    /// Driving expression, for scenes with a face.
    pub z_exp: Option<Vec<f64>>,
}

impl Target {
    /// Foreground mask used for masked metrics.
    pub fn mask(&self) -> Vec<bool> {
        self.alpha.iter().map(|&a| a > 0.5).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub targets: Vec<Target>,
}

/// Analytic density and colour of a blob field.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobField {
    pub blobs: Vec<(Vec3, f64, f64, Vec3)>,
}

impl BlobField {
    pub fn random(count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs = (0..count)
            .map(|_| {
                let c = [0; 3].map(|_| rng.random_range(-0.35..0.35));
                let radius = rng.random_range(0.15..0.3);
                let amp = rng.random_range(8.0..20.0);
                let col = [0; 3].map(|_| rng.random_range(0.1..0.9));
                (c, radius, amp, col)
            })
            .collect();
        BlobField { blobs }
    }

    /// Density and density-weighted colour at `p`.
    pub fn eval(&self, p: &Vec3) -> (Vec3, f64) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for (c, r, a, col) in &self.blobs {
            let d = math::sub(p, c);
            let w = a * (-math::dot(&d, &d) / (2.0 * r * r)).exp();
            sigma += w;
            acc = math::add(&acc, &math::scale(col, w));
        }
        let rgb = if sigma > 0.0 { math::scale(&acc, 1.0 / sigma) } else { [0.0; 3] };
        (rgb, sigma)
    }

    /// Midpoint-quadrature render, matching the model's sampling.
    pub fn render(&self, camera: &Camera, t_near: f64, t_far: f64, samples: usize) -> Result<(Image, Vec<f64>)> {
        let rays = geometry::generate_rays(camera, t_near, t_far)?;
        let pts = geometry::stratified_sample(&rays, samples, None)?;
        let mut rgb = Vec::with_capacity(3 * rays.len());
        let mut alpha = Vec::with_capacity(rays.len());
        for r in 0..rays.len() {
            let span = r * samples..(r + 1) * samples;
            let (cols, sig): (Vec<Vec3>, Vec<f64>) = pts.positions[span.clone()].iter().map(|p| self.eval(p)).unzip();
            let (c, a) = renderer::integrate_ray(&cols, &sig, &pts.depths[span], t_far)?;
            rgb.extend(c);
            alpha.push(a);
        }
        Ok((Image::from_hwc(camera.width, camera.height, 3, rgb)?, alpha))
    }
}

/// Painted vertex colours: skin, hair on top, dark eye sockets and lips.
pub fn head_texture(model: &MorphableModel) -> Vec<Vec3> {
    let mouth = morphable::mouth_center();
    let eyes = [math::normalize(&[0.35, -0.2, -1.0]), math::normalize(&[-0.35, -0.2, -1.0])];
    model
        .template
        .iter()
        .map(|v| {
            let d = math::normalize(v);
            let near = |c: &Vec3, r: f64| math::norm(&math::sub(&d, c)) < r;
            if d[1] < -0.45 {
                [0.25, 0.15, 0.1]
            } else if eyes.iter().any(|e| near(e, 0.16)) {
                [0.15, 0.15, 0.3]
            } else if near(&mouth, 0.3) {
                if d[1] < mouth[1] {
                    [0.75, 0.15, 0.15]
                } else {
                    [0.35, 0.05, 0.1]
                }
            } else {
                let shade = 0.75 + 0.25 * (-d[2]).max(0.0);
                [0.9 * shade, 0.7 * shade, 0.55 * shade]
            }
        })
        .collect()
}

/// Box-filtered supersampled rasterization of the textured head.
pub fn render_textured_head(
    model: &MorphableModel,
    colors: &[Vec3],
    coeffs: &FaceCoefficients,
    camera: &Camera,
    supersample: usize,
) -> Result<(Image, Vec<f64>)> {
    let s = supersample;
    let big = camera.resized(camera.width * s, camera.height * s);
    let verts = model.compute_vertices(coeffs)?;
    let img = raster::rasterize(&verts, &model.triangles, colors, &big)?;
    let (w, h) = (camera.width, camera.height);
    let mut rgb = vec![0.0; 3 * w * h];
    let mut alpha = vec![0.0; w * h];
    let norm = 1.0 / (s * s) as f64;
    for y in 0..h * s {
        for x in 0..w * s {
            let src = y * w * s + x;
            let dst = (y / s) * w + x / s;
            if img.mask[src] {
                alpha[dst] += norm;
            }
            for c in 0..3 {
                rgb[3 * dst + c] += norm * img.rgb[3 * src + c];
            }
        }
    }
    Ok((Image::from_hwc(w, h, 3, rgb)?, alpha))
}

/// Inclusive pixel box `(x0, y0, x1, y1)` around the projected vertices
/// moved by expression axis 0, over neutral and fully open expressions.
pub fn mouth_bbox(model: &MorphableModel, z_shp: &[f64], camera: &Camera) -> Result<(usize, usize, usize, usize)> {
    let support = model.expr_support(0);
    let mut coeffs = FaceCoefficients::zeros(model);
    coeffs.z_shp = z_shp.to_vec();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for open in [0.0, 1.0] {
        coeffs.z_exp[0] = open;
        let verts = model.compute_vertices(&coeffs)?;
        for &i in &support {
            let (u, v, _) = camera
                .project(&verts[i])
                .ok_or_else(|| Error::Geometry("mouth vertex behind the camera".into()))?;
            x0 = x0.min(u);
            x1 = x1.max(u);
            y0 = y0.min(v);
            y1 = y1.max(v);
        }
    }
    let clip = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
    Ok((
        clip(x0.floor(), camera.width),
        clip(y0.floor(), camera.height),
        clip(x1.floor(), camera.width),
        clip(y1.floor(), camera.height),
    ))
}

impl Scene {
    /// Deterministic in `spec`. Images are stored 8-bit quantized so a scene
    /// written to disk and read back is identical.
    pub fn generate(spec: &SceneSpec) -> Result<Scene> {
        spec.validate()?;
        let mut targets = Vec::new();
        match spec.kind {
            SceneKind::BlobField => {
                let field = BlobField::random(spec.blobs, spec.seed);
                for camera in spec.cameras() {
                    let (rgb, alpha) = field.render(&camera, spec.t_near, spec.t_far, spec.samples_per_ray)?;
                    targets.push(quantized_target(camera, rgb, alpha, None));
                }
            }
            SceneKind::TexturedHead => {
                let model = spec.morphable();
                let colors = head_texture(&model);
                let z_shp = spec.source_shape(&model);
                for z_exp in spec.expressions(&model) {
                    for camera in spec.cameras() {
                        let coeffs = FaceCoefficients {
                            z_shp: z_shp.clone(),
                            z_exp: z_exp.clone(),
                            ..FaceCoefficients::zeros(&model)
                        };
                        let (rgb, alpha) = render_textured_head(&model, &colors, &coeffs, &camera, spec.supersample)?;
                        targets.push(quantized_target(camera, rgb, alpha, Some(z_exp.clone())));
                    }
                }
            }
        }
        Ok(Scene {
            spec: spec.clone(),
            targets,
        })
    }

    /// SECC pair tensor `[6, H, W]` for a driving expression, rendered with
    /// the frontal rig at `secc_size` and resized to `width × height`.
    pub fn secc_pair(&self, z_exp: &[f64], secc_size: usize, width: usize, height: usize) -> Result<Tensor> {
        let model = self.spec.morphable();
        let cam = self.spec.frontal_camera(secc_size, secc_size);
        let pair = raster::make_secc_pair(&model, &self.spec.source_shape(&model), z_exp, &cam)?;
        raster::secc_pair_tensor(&pair, width, height)
    }

    /// Writes target images, cameras, the face model and `manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, t) in self.targets.iter().enumerate() {
            let e = ManifestEntry {
                image: format!("target_{i:03}.ppm"),
                alpha: format!("alpha_{i:03}.pgm"),
                camera: format!("camera_{i:03}.json"),
                z_exp: t.z_exp.clone(),
            };
            t.rgb.save(dir.join(&e.image))?;
            Image::from_hwc(t.camera.width, t.camera.height, 1, t.alpha.clone())?.save(dir.join(&e.alpha))?;
            std::fs::write(dir.join(&e.camera), serde_json::to_string_pretty(&t.camera)?)?;
            entries.push(e);
        }
        let morphable = match self.spec.kind {
            SceneKind::TexturedHead => {
                std::fs::write(dir.join("morphable.json"), self.spec.morphable().to_json()?)?;
                Some("morphable.json".to_string())
            }
            SceneKind::BlobField => None,
        };
        let manifest = Manifest {
            spec: self.spec.clone(),
            morphable,
            targets: entries,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Scene> {
        let dir: PathBuf = dir.as_ref().into();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let targets = manifest
            .targets
            .iter()
            .map(|e| {
                let camera: Camera = serde_json::from_str(&std::fs::read_to_string(dir.join(&e.camera))?)?;
                let rgb = Image::load(dir.join(&e.image))?;
                let alpha = Image::load(dir.join(&e.alpha))?;
                if rgb.channels != 3 || alpha.channels != 1 || (rgb.width, rgb.height) != (camera.width, camera.height) {
                    return Err(Error::Format(format!("target {} does not match its camera", e.image)));
                }
                Ok(Target {
                    camera,
                    rgb,
                    alpha: alpha.data,
                    z_exp: e.z_exp.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            spec: manifest.spec,
            targets,
        })
    }
}

fn quantized_target(camera: Camera, rgb: Image, alpha: Vec<f64>, z_exp: Option<Vec<f64>>) -> Target {
    let alpha = Image {
        width: camera.width,
        height: camera.height,
        channels: 1,
        data: alpha,
    }
    .quantized()
    .data;
    Target {
        camera,
        rgb: rgb.quantized(),
        alpha,
        z_exp,
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    image: String,
    alpha: String,
    camera: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z_exp: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: SceneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    morphable: Option<String>,
    targets: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_scene_is_centered_and_deterministic() {
        let spec = SceneSpec::new(SceneKind::BlobField, 1);
        let a = Scene::generate(&spec).unwrap();
        assert_eq!(a, Scene::generate(&spec).unwrap());
        let t = &a.targets[0];
        assert!(t.alpha[16 * 32 + 16] > 0.5);
        assert!(t.alpha[0] < 0.01);
        assert_ne!(a, Scene::generate(&SceneSpec::new(SceneKind::BlobField, 2)).unwrap());
    }

    #[test]
    fn textured_head_has_every_camera_per_expression() {
        let spec = SceneSpec {
            width: 16,
            height: 16,
            supersample: 2,
            ..SceneSpec::new(SceneKind::TexturedHead, 0)
        };
        let s = Scene::generate(&spec).unwrap();
        assert_eq!(s.targets.len(), 4);
        assert_eq!(s.targets[2].camera, s.targets[0].camera);
        let centre = 8 * 16 + 8;
        assert!(s.targets.iter().all(|t| t.alpha[centre] == 1.0 && t.alpha[0] == 0.0));
        let (x0, y0, x1, y1) = mouth_bbox(&spec.morphable(), &[0.0; 8], &s.targets[0].camera).unwrap();
        assert!(x0 < 8 && x1 > 8 && y0 > 8 && y1 <= 15, "bbox {:?}", (x0, y0, x1, y1));
    }
}
