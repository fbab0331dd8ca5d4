//! Radiance head, ray quadrature and image rendering.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::appearance::{self, SourceView};
use crate::autodiff::{self, Graph, ParamSet, Var};
use crate::config::ModelConfig;
use crate::deformation;
use crate::error::{Error, Result};
use crate::geometry::{self, Camera, PointBatch};
use crate::image::Image;
use crate::math::Vec3;
use crate::nn;
use crate::tensor::Tensor;

pub const HEAD_PREFIX: &str = "head";

/// Two dense layers: `[in, hidden]` then `[hidden, 4]`, leaky ReLU between.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceHead {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub slope: f64,
}

fn head_name(layer: usize, part: &str) -> String {
    format!("{HEAD_PREFIX}.layer{layer}.{part}")
}

impl RadianceHead {
    pub fn from_params(params: &ParamSet, slope: f64) -> Result<Self> {
        let get = |l, p| params.get(&head_name(l, p)).cloned();
        let head = RadianceHead {
            w0: get(0, "w")?,
            b0: get(0, "b")?,
            w1: get(1, "w")?,
            b1: get(1, "b")?,
            slope,
        };
        let (i, h) = (head.w0.shape()[0], head.w0.shape()[1]);
        if head.b0.shape() != [h] || head.w1.shape() != [h, 4] || head.b1.shape() != [4] || i == 0 {
            return Err(Error::shape("radiance head", "inconsistent layer shapes".to_string()));
        }
        Ok(head)
    }

    pub fn input_dim(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w0.shape()[1]
    }
}

pub fn init_head(config: &ModelConfig, params: &mut ParamSet, rng: &mut impl rand::Rng) {
    let (i, h) = (config.head_input(), config.hidden);
    params.insert(head_name(0, "w"), nn::normal_tensor(&[i, h], (2.0 / i as f64).sqrt(), rng));
    params.insert(head_name(0, "b"), Tensor::zeros(&[h]).with_requires_grad(true));
    params.insert(head_name(1, "w"), nn::normal_tensor(&[h, 4], (1.0 / h as f64).sqrt(), rng));
    let mut b1 = Tensor::zeros(&[4]).with_requires_grad(true);
    b1.data_mut()[3] = config.density_bias;
    params.insert(head_name(1, "b"), b1);
}

/// Colour in `(0, 1)³` and non-negative density for one point.
pub fn query_radiance(head: &RadianceHead, feature: &[f64], gamma: &[f64]) -> Result<(Vec3, f64)> {
    let (i, h) = (head.input_dim(), head.hidden());
    if feature.len() + gamma.len() != i {
        return Err(Error::shape(
            "query_radiance",
            format!("{} feature + {} encoding values for a head expecting {i}", feature.len(), gamma.len()),
        ));
    }
    let x: Vec<f64> = feature.iter().chain(gamma).copied().collect();
    let (w0, w1) = (head.w0.data(), head.w1.data());
    let mut hidden = head.b0.data().to_vec();
    for (r, xv) in x.iter().enumerate() {
        for (c, hv) in hidden.iter_mut().enumerate() {
            *hv += xv * w0[r * h + c];
        }
    }
    let mut out = head.b1.data().to_vec();
    for (r, hv) in hidden.iter().enumerate() {
        let a = if *hv > 0.0 { *hv } else { head.slope * hv };
        for (c, o) in out.iter_mut().enumerate() {
            *o += a * w1[r * 4 + c];
        }
    }
    let rgb = [0, 1, 2].map(|c| autodiff::sigmoid(out[c]));
    Ok((rgb, autodiff::softplus(out[3])))
}

/// Graph form of the head over `[P, in]` inputs. Returns `[P, 3]` colour
/// and `[P]` density.
pub fn query_radiance_graph(g: &mut Graph, params: &ParamSet, slope: f64, input: Var) -> Result<(Var, Var)> {
    let w0 = g.param_named(params, &head_name(0, "w"))?;
    let b0 = g.param_named(params, &head_name(0, "b"))?;
    let w1 = g.param_named(params, &head_name(1, "w"))?;
    let b1 = g.param_named(params, &head_name(1, "b"))?;
    let x = g.matmul(input, w0)?;
    let x = g.add_bias(x, b0)?;
    let x = g.leaky_relu(x, slope);
    let x = g.matmul(x, w1)?;
    let out = g.add_bias(x, b1)?;
    let rgb = g.slice_cols(out, 0, 3)?;
    let rgb = g.sigmoid(rgb);
    let sigma = g.slice_cols(out, 3, 4)?;
    let sigma = g.softplus(sigma);
    let p = g.shape(sigma)[0];
    let sigma = g.reshape(sigma, &[p])?;
    Ok((rgb, sigma))
}

/// Midpoint-rule emission-absorption along one ray. `depths` must increase
/// and stay below `t_far`, which closes the last segment.
pub fn integrate_ray(rgbs: &[Vec3], sigmas: &[f64], depths: &[f64], t_far: f64) -> Result<(Vec3, f64)> {
    let n = depths.len();
    if rgbs.len() != n || sigmas.len() != n || n == 0 {
        return Err(Error::shape("integrate_ray", format!("{} colours, {} densities, {n} depths", rgbs.len(), sigmas.len())));
    }
    if depths.windows(2).any(|w| w[1] <= w[0]) || depths[n - 1] > t_far {
        return Err(Error::InvalidArgument("sample depths must increase strictly and end before t_far".into()));
    }
    let mut trans = 1.0;
    let mut pixel = [0.0; 3];
    for i in 0..n {
        let delta = if i + 1 < n { depths[i + 1] } else { t_far } - depths[i];
        let next = trans * (-sigmas[i] * delta).exp();
        let w = trans - next;
        for c in 0..3 {
            pixel[c] += w * rgbs[i][c];
        }
        trans = next;
    }
    Ok((pixel, 1.0 - trans))
}

/// Parameters together with the configuration that shapes them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh parameters for every enabled component, drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        appearance::init_params(&config.appearance, &mut params, &mut rng)?;
        if let Some(led) = &config.led {
            deformation::init_params(led, config.samples_per_ray, &mut params, &mut rng)?;
        }
        init_head(&config, &mut params, &mut rng);
        Ok(Model { config, params })
    }

    pub fn head(&self) -> Result<RadianceHead> {
        RadianceHead::from_params(&self.params, self.config.leaky_slope)
    }
}

/// Inputs beyond the parameters: the `[6, H, W]` SECC pair for the
/// deformation module and the source view for encoder-mode appearance.
#[derive(Clone, Copy, Debug, Default)]
pub struct Conditioning<'a> {
    pub secc_pair: Option<&'a Tensor>,
    pub source: Option<SourceView<'a>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    /// Seed for jittered stratified sampling; midpoints when `None`.
    pub jitter: Option<u64>,
    /// `(sigma, seed)` noise on the points seen by the deformation module.
    pub perturb: Option<(f64, u64)>,
    /// Render only these pixels (row-major indices), in this order.
    pub rays: Option<Vec<usize>>,
    /// Set to `false` to sample the planes at the undeformed points.
    pub deform: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            jitter: None,
            perturb: None,
            rays: None,
            deform: true,
        }
    }
}

/// Vars recorded by [`render_graph`].
#[derive(Clone, Debug)]
pub struct RenderVars {
    /// `[R, 4]`: colour then accumulated opacity.
    pub rgba: Var,
    /// `[R·N, 3]` offsets for the rendered rays, when deformation ran.
    pub delta: Option<Var>,
    pub rays: Vec<usize>,
    /// Undeformed samples of the rendered rays.
    pub points: PointBatch,
}

fn check_camera(config: &ModelConfig, camera: &Camera) -> Result<()> {
    if camera.width != config.width || camera.height != config.height {
        return Err(Error::InvalidArgument(format!(
            "camera is {}x{}, model renders {}x{}",
            camera.width, camera.height, config.width, config.height
        )));
    }
    Ok(())
}

/// Records rays → samples → offsets → plane lookup → head → compositing.
pub fn render_graph(
    g: &mut Graph,
    params: &ParamSet,
    config: &ModelConfig,
    camera: &Camera,
    cond: Conditioning<'_>,
    opts: &RenderOptions,
) -> Result<RenderVars> {
    config.validate()?;
    check_camera(config, camera)?;
    let rays = geometry::generate_rays(camera, config.t_near, config.t_far)?;
    let all = geometry::stratified_sample(&rays, config.samples_per_ray, opts.jitter)?;
    let n = config.samples_per_ray;
    let ray_ids: Vec<usize> = match &opts.rays {
        Some(r) => {
            if let Some(&bad) = r.iter().find(|&&i| i >= all.rays()) {
                return Err(Error::InvalidArgument(format!("ray {bad} outside a {}-pixel image", all.rays())));
            }
            r.clone()
        }
        None => (0..all.rays()).collect(),
    };
    let subset = opts.rays.is_some();
    let points = if subset { all.select_rays(&ray_ids) } else { all.clone() };
    let original = g.constant(Tensor::new(vec![points.positions.len(), 3], points.flat_positions())?);

    let delta = match (&config.led, opts.deform) {
        (Some(led), true) => {
            let pair = cond
                .secc_pair
                .ok_or_else(|| Error::InvalidArgument("the deformation module needs a SECC pair".into()))?;
            let led_input = match opts.perturb {
                Some((sigma, seed)) => deformation::perturb_points(&all, sigma, seed)?,
                None => all.clone(),
            };
            let d = deformation::led_delta_graph(g, params, led, config.leaky_slope, pair, &led_input)?;
            Some(if subset {
                let rows: Vec<usize> = ray_ids.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
                g.gather_rows(d, &rows)?
            } else {
                d
            })
        }
        _ => None,
    };
    let query = match delta {
        Some(d) => g.add(original, d)?,
        None => original,
    };

    let levels = appearance::build_pyramid_graph(g, params, &config.appearance, config.leaky_slope, cond.source)?;
    let features = appearance::sample_multiscale_graph(g, &levels, query, config.appearance.extent)?;
    let mut gamma = Vec::with_capacity(points.positions.len() * 6 * config.pe_levels);
    for p in &points.positions {
        geometry::encode_into(p, config.pe_levels, &mut gamma);
    }
    let gamma = g.constant(Tensor::new(vec![points.positions.len(), 6 * config.pe_levels], gamma)?);
    let input = g.concat(&[features, gamma], 1)?;
    let (rgb, sigma) = query_radiance_graph(g, params, config.leaky_slope, input)?;
    let r = ray_ids.len();
    let rgb = g.reshape(rgb, &[r, n, 3])?;
    let sigma = g.reshape(sigma, &[r, n])?;
    let rgba = g.composite(rgb, sigma, &points.deltas())?;
    Ok(RenderVars {
        rgba,
        delta,
        rays: ray_ids,
        points,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W × 3`, composited over black.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn rgb_image(&self) -> Image {
        Image::from_hwc(self.width, self.height, 3, self.rgb.clone()).expect("sizes agree by construction")
    }

    pub fn alpha_image(&self) -> Image {
        Image::from_hwc(self.width, self.height, 1, self.alpha.clone()).expect("sizes agree by construction")
    }
}

/// Deterministic full-image render with midpoint samples.
pub fn render_image(model: &Model, camera: &Camera, cond: Conditioning<'_>) -> Result<RenderedImage> {
    render_with(model, camera, cond, &RenderOptions::default())
}

pub fn render_with(model: &Model, camera: &Camera, cond: Conditioning<'_>, opts: &RenderOptions) -> Result<RenderedImage> {
    let opts = RenderOptions { rays: None, ..opts.clone() };
    let mut g = Graph::new();
    let vars = render_graph(&mut g, &model.params, &model.config, camera, cond, &opts)?;
    let out = g.value(vars.rgba).data();
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "rendered pixel".into(),
            index: i / 4,
        });
    }
    Ok(RenderedImage {
        width: camera.width,
        height: camera.height,
        rgb: out.chunks_exact(4).flat_map(|p| p[..3].to_vec()).collect(),
        alpha: out.chunks_exact(4).map(|p| p[3]).collect(),
    })
}

/// Renders from `base` rotated about `pivot` by each `(yaw, pitch)` pair.
/// The conditioning is reused unchanged, so the deformation at a given
/// world point does not depend on the view.
pub fn orbit_render(
    model: &Model,
    base: &Camera,
    pivot: &Vec3,
    yaws: &[f64],
    pitches: &[f64],
    cond: Conditioning<'_>,
) -> Result<Vec<RenderedImage>> {
    if yaws.len() != pitches.len() {
        return Err(Error::InvalidArgument(format!("{} yaw and {} pitch angles", yaws.len(), pitches.len())));
    }
    yaws.iter()
        .zip(pitches)
        .map(|(&y, &p)| render_image(model, &base.orbit(y, p, pivot), cond))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_gives_half_grey_and_ln2_density() {
        let head = RadianceHead {
            w0: Tensor::zeros(&[5, 3]),
            b0: Tensor::zeros(&[3]),
            w1: Tensor::zeros(&[3, 4]),
            b1: Tensor::zeros(&[4]),
            slope: 0.2,
        };
        let (rgb, sigma) = query_radiance(&head, &[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap();
        assert_eq!(rgb, [0.5; 3]);
        assert!((sigma - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(query_radiance(&head, &[1.0], &[3.0]).is_err());
    }

    #[test]
    fn vacuum_and_saturation() {
        let depths = [1.0, 1.5, 2.0];
        let (p, a) = integrate_ray(&[[1.0; 3]; 3], &[0.0; 3], &depths, 2.5).unwrap();
        assert_eq!((p, a), ([0.0; 3], 0.0));
        let (p, a) = integrate_ray(&[[0.2, 0.4, 0.6], [1.0; 3], [1.0; 3]], &[1e4, 0.0, 0.0], &depths, 2.5).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.2).abs() < 1e-12 && (p[2] - 0.6).abs() < 1e-12);
        assert!(integrate_ray(&[[0.0; 3]; 2], &[0.0; 2], &[2.0, 1.0], 3.0).is_err());
    }

    #[test]
    fn graph_compositing_matches_pure_integration() {
        let cfg = ModelConfig {
            width: 3,
            height: 2,
            samples_per_ray: 5,
            appearance: crate::config::AppearanceConfig {
                resolutions: vec![4, 8],
                channels: vec![2, 3],
                ..Default::default()
            },
            hidden: 6,
            ..Default::default()
        };
        let model = Model::init(cfg.clone(), 3).unwrap();
        let cam = Camera::frontal(3, 2, 2.0, 1.0);
        let img = render_image(&model, &cam, Conditioning::default()).unwrap();

        let head = model.head().unwrap();
        let ms = appearance::MultiScaleTriPlane::from_params(&model.params, &cfg.appearance).unwrap();
        let rays = geometry::generate_rays(&cam, cfg.t_near, cfg.t_far).unwrap();
        let pts = geometry::stratified_sample(&rays, 5, None).unwrap();
        for r in 0..6 {
            let mut rgbs = Vec::new();
            let mut sig = Vec::new();
            for i in 0..5 {
                let p = pts.positions[r * 5 + i];
                let f = appearance::sample_multiscale(&ms, &p).unwrap();
                let (c, s) = query_radiance(&head, &f, &geometry::positional_encoding(&p, cfg.pe_levels)).unwrap();
                rgbs.push(c);
                sig.push(s);
            }
            let (c, a) = integrate_ray(&rgbs, &sig, &pts.depths[r * 5..(r + 1) * 5], cfg.t_far).unwrap();
            assert!((a - img.alpha[r]).abs() < 1e-12);
            for k in 0..3 {
                assert!((c[k] - img.rgb[3 * r + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ray_subset_matches_full_render() {
        let cfg = ModelConfig {
            width: 4,
            height: 4,
            samples_per_ray: 4,
            hidden: 8,
            ..Default::default()
        };
        let model = Model::init(cfg.clone(), 1).unwrap();
        let cam = Camera::frontal(4, 4, 2.0, 1.0);
        let full = render_image(&model, &cam, Conditioning::default()).unwrap();
        let mut g = Graph::new();
        let opts = RenderOptions {
            rays: Some(vec![9, 2]),
            ..Default::default()
        };
        let v = render_graph(&mut g, &model.params, &cfg, &cam, Conditioning::default(), &opts).unwrap();
        let d = g.value(v.rgba).data();
        assert_eq!(d[3], full.alpha[9]);
        assert_eq!(d[7], full.alpha[2]);
    }
}
