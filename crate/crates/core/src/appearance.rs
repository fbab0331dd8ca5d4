//! Canonical appearance field: multi-scale tri-planes, the camera-to-world
//! plane transform and the image-conditioned plane pyramid.
//!
//! Plane order inside a level is `xy, xz, yz`. Each plane is a `[C, R, R]`
//! grid whose columns follow the first named axis and rows the second
//! (see [`crate::interp`] for the node placement).

use rand::Rng;

use crate::autodiff::{plane_coords, Graph, ParamSet, Var, PLANE_AXES};
use crate::config::{AppearanceConfig, AppearanceMode, PlaneTransform};
use crate::error::{Error, Result};
use crate::geometry::{Camera, ROTATION_TOL};
use crate::interp;
use crate::math::{self, Mat3, Vec3};
use crate::nn::{self, ConvSpec};
use crate::tensor::Tensor;

pub const PLANE_NAMES: [&str; 3] = ["xy", "xz", "yz"];

pub fn plane_param_name(level: usize, plane: usize) -> String {
    format!("level{level}.plane{}", PLANE_NAMES[plane])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneLevel {
    pub planes: [Tensor; 3],
    pub extent: f64,
}

impl TriPlaneLevel {
    pub fn new(planes: [Tensor; 3], extent: f64) -> Result<Self> {
        let s = planes[0].shape().to_vec();
        if s.len() != 3 || s[1] != s[2] || s[1] < 2 {
            return Err(Error::shape("tri-plane", format!("plane shape {s:?} must be [C, R, R] with R >= 2")));
        }
        if planes.iter().any(|p| p.shape() != s.as_slice()) {
            return Err(Error::shape("tri-plane", "all three planes must share C and R"));
        }
        if !(extent > 0.0) {
            return Err(Error::InvalidArgument(format!("extent {extent} must be positive")));
        }
        Ok(TriPlaneLevel { planes, extent })
    }

    pub fn constant(channels: usize, res: usize, extent: f64, value: f64) -> Self {
        let p = Tensor::full(&[channels, res, res], value);
        TriPlaneLevel {
            planes: [p.clone(), p.clone(), p],
            extent,
        }
    }

    pub fn channels(&self) -> usize {
        self.planes[0].shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.planes[0].shape()[1]
    }
}

/// Averaged bilinear lookup of the three planes at `p`, clamping outside
/// the extent.
pub fn sample_level(level: &TriPlaneLevel, p: &Vec3) -> Result<Vec<f64>> {
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "tri-plane query point".into(),
            index: i,
        });
    }
    let (c, res) = (level.channels(), level.resolution());
    let mut out = vec![0.0; c];
    for (k, (u, v)) in plane_coords(p).into_iter().enumerate() {
        let t = interp::taps(u, v, level.extent, res);
        interp::sample_into(level.planes[k].data(), c, res, &t, 1.0 / 3.0, &mut out);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleTriPlane {
    pub levels: Vec<TriPlaneLevel>,
}

impl MultiScaleTriPlane {
    pub fn new(levels: Vec<TriPlaneLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("a tri-plane pyramid needs at least one level".into()));
        }
        if levels.windows(2).any(|w| w[1].resolution() <= w[0].resolution()) {
            return Err(Error::InvalidArgument("level resolutions must strictly increase".into()));
        }
        Ok(MultiScaleTriPlane { levels })
    }

    pub fn total_channels(&self) -> usize {
        self.levels.iter().map(TriPlaneLevel::channels).sum()
    }

    /// Reads direct-mode planes out of a parameter set.
    pub fn from_params(params: &ParamSet, config: &AppearanceConfig) -> Result<Self> {
        let levels = (0..config.resolutions.len())
            .map(|j| {
                let planes = [0, 1, 2].map(|k| params.get(&plane_param_name(j, k)).cloned());
                let [a, b, c] = planes;
                TriPlaneLevel::new([a?, b?, c?], config.extent)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }
}

/// Per-level features concatenated in level order.
pub fn sample_multiscale(ms: &MultiScaleTriPlane, p: &Vec3) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ms.total_channels());
    for level in &ms.levels {
        out.extend(sample_level(level, p)?);
    }
    Ok(out)
}

/// Source-grid coordinates for every node of the three world planes under
/// `q = R·p + t`, with the out-of-plane coordinate of each node at zero.
pub(crate) fn c2w_coords(res: usize, extent: f64, rotation: &Mat3, translation: &Vec3) -> [Vec<(f64, f64)>; 3] {
    PLANE_AXES.map(|(a0, a1)| {
        let mut coords = Vec::with_capacity(res * res);
        for row in 0..res {
            for col in 0..res {
                let mut p = [0.0; 3];
                p[a0] = interp::node_coord(col, extent, res);
                p[a1] = interp::node_coord(row, extent, res);
                let q = math::add(&math::mat_vec(rotation, &p), translation);
                coords.push((q[a0], q[a1]));
            }
        }
        coords
    })
}

fn check_rotation(r: &Mat3) -> Result<()> {
    if math::is_rotation(r, ROTATION_TOL) {
        Ok(())
    } else {
        Err(Error::Geometry(format!("{r:?} is not a rotation")))
    }
}

/// Resamples camera-frame volume features into world-frame planes: each
/// world plane node `p` takes the value of the matching camera-frame plane
/// at `R·p + t`.
pub fn camera_to_world_planes(volume: &TriPlaneLevel, rotation: &Mat3, translation: &Vec3) -> Result<TriPlaneLevel> {
    check_rotation(rotation)?;
    let (c, res) = (volume.channels(), volume.resolution());
    let coords = c2w_coords(res, volume.extent, rotation, translation);
    let n = res * res;
    let planes = [0, 1, 2].map(|k| {
        let src = volume.planes[k].data();
        let mut out = vec![0.0; c * n];
        let mut tmp = vec![0.0; c];
        for (j, &(u, v)) in coords[k].iter().enumerate() {
            tmp.iter_mut().for_each(|x| *x = 0.0);
            let t = interp::taps(u, v, volume.extent, res);
            interp::sample_into(src, c, res, &t, 1.0, &mut tmp);
            for ch in 0..c {
                out[ch * n + j] = tmp[ch];
            }
        }
        Tensor::new(vec![c, res, res], out).expect("shape matches")
    });
    TriPlaneLevel::new(planes, volume.extent)
}

/// Translation used by the plane transform. The camera-frame volume is
/// centred on the optical axis at the camera's distance from the world
/// origin, so a camera aimed at the origin contributes no translation.
pub fn volume_translation(camera: &Camera, mode: PlaneTransform) -> Vec3 {
    match mode {
        PlaneTransform::RotationOnly => [0.0; 3],
        PlaneTransform::Rigid => {
            let t = camera.translation;
            [t[0], t[1], t[2] - math::norm(&t)]
        }
    }
}

fn c2w_graph(g: &mut Graph, v: [Var; 3], res: usize, extent: f64, rotation: &Mat3, translation: &Vec3) -> Result<[Var; 3]> {
    let coords = c2w_coords(res, extent, rotation, translation);
    Ok([
        g.resample_plane(v[0], &coords[0], res, extent)?,
        g.resample_plane(v[1], &coords[1], res, extent)?,
        g.resample_plane(v[2], &coords[2], res, extent)?,
    ])
}

/// Source view for encoder mode: a `[C_in, S, S]` image and its camera.
#[derive(Clone, Copy, Debug)]
pub struct SourceView<'a> {
    pub image: &'a Tensor,
    pub camera: &'a Camera,
}

fn feature_specs(config: &AppearanceConfig) -> Vec<ConvSpec> {
    let e = &config.encoder;
    let downs = (e.source_size / config.resolutions[0]).trailing_zeros() as usize;
    let mut specs = vec![ConvSpec::same(e.in_channels, e.feature_channels, 3)];
    specs.extend((0..downs).map(|_| ConvSpec {
        cin: e.feature_channels,
        cout: e.feature_channels,
        kernel: 3,
        stride: 2,
    }));
    specs
}

fn psi_specs(config: &AppearanceConfig, level: usize) -> [ConvSpec; 2] {
    let e = &config.encoder;
    let cin = e.feature_channels + if level > 0 { config.channels[level - 1] } else { 0 };
    [ConvSpec::same(cin, e.psi_hidden, 3), ConvSpec::same(e.psi_hidden, config.channels[level], 3)]
}

/// Adds the appearance parameters for `config.mode` to `params`.
pub fn init_params(config: &AppearanceConfig, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
    config.validate()?;
    match config.mode {
        AppearanceMode::Direct => {
            for (j, (&res, &c)) in config.resolutions.iter().zip(&config.channels).enumerate() {
                for k in 0..3 {
                    params.insert(plane_param_name(j, k), nn::normal_tensor(&[c, res, res], config.init_std, rng));
                }
            }
        }
        AppearanceMode::Encoder => {
            for (i, s) in feature_specs(config).iter().enumerate() {
                nn::init_conv_stack(params, &format!("enc.feat{i}"), std::slice::from_ref(s), 1.0, rng);
            }
            for j in 0..config.resolutions.len() {
                for name in PLANE_NAMES {
                    nn::init_conv_stack(params, &format!("enc.psi{j}.{name}"), &psi_specs(config, j), 1.0, rng);
                }
            }
        }
    }
    Ok(())
}

/// Records the plane pyramid on `g` and returns the three world-frame plane
/// variables of every level, lowest resolution first.
///
/// Direct mode reads the plane parameters. Encoder mode extracts features
/// `M^0..M^n` with a strided conv stack, predicts `V^0 = ψ^0(M^0)` and
/// `V^{j+1} = ψ^{j+1}([M^{j+1}, F^j↑])` per plane, mapping each `V^j` to
/// world frame with [`camera_to_world_planes`].
pub fn build_pyramid_graph(
    g: &mut Graph,
    params: &ParamSet,
    config: &AppearanceConfig,
    slope: f64,
    source: Option<SourceView<'_>>,
) -> Result<Vec<[Var; 3]>> {
    config.validate()?;
    match config.mode {
        AppearanceMode::Direct => (0..config.resolutions.len())
            .map(|j| {
                Ok([
                    g.param_named(params, &plane_param_name(j, 0))?,
                    g.param_named(params, &plane_param_name(j, 1))?,
                    g.param_named(params, &plane_param_name(j, 2))?,
                ])
            })
            .collect(),
        AppearanceMode::Encoder => {
            let src = source.ok_or_else(|| Error::InvalidArgument("encoder mode needs a source image and camera".into()))?;
            let e = &config.encoder;
            let want = [e.in_channels, e.source_size, e.source_size];
            if src.image.shape() != want {
                return Err(Error::shape("build_pyramid", format!("source image {:?}, expected {want:?}", src.image.shape())));
            }
            src.camera.validate()?;
            let rotation = src.camera.rotation;
            let translation = volume_translation(src.camera, e.transform);

            let mut x = g.constant(src.image.clone());
            let mut features = Vec::new();
            for (i, s) in feature_specs(config).iter().enumerate() {
                x = nn::conv_stack(g, params, &format!("enc.feat{i}"), std::slice::from_ref(s), slope, x)?;
                x = g.leaky_relu(x, slope);
                features.push(x);
            }
            // features[i] has resolution S / 2^i; pick M^j at resolutions[j].
            let pick = |res: usize| -> Var {
                let i = (e.source_size / res).trailing_zeros() as usize;
                features[i]
            };
            let mut levels: Vec<[Var; 3]> = Vec::new();
            for (j, &res) in config.resolutions.iter().enumerate() {
                let m = pick(res);
                let mut planes = [m; 3];
                for (k, name) in PLANE_NAMES.iter().enumerate() {
                    let input = match levels.last() {
                        None => m,
                        Some(prev) => {
                            let up = g.upsample2x_nearest(prev[k])?;
                            g.concat_channels(&[m, up])?
                        }
                    };
                    planes[k] = nn::conv_stack(g, params, &format!("enc.psi{j}.{name}"), &psi_specs(config, j), slope, input)?;
                }
                levels.push(c2w_graph(g, planes, res, config.extent, &rotation, &translation)?);
            }
            Ok(levels)
        }
    }
}

/// Value-only pyramid construction.
pub fn build_pyramid(
    config: &AppearanceConfig,
    params: &ParamSet,
    slope: f64,
    source: Option<SourceView<'_>>,
) -> Result<MultiScaleTriPlane> {
    let mut g = Graph::new();
    let levels = build_pyramid_graph(&mut g, params, config, slope, source)?;
    let levels = levels
        .into_iter()
        .map(|vars| {
            let [a, b, c] = vars.map(|v| g.value(v).clone());
            TriPlaneLevel::new([a, b, c], config.extent)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiScaleTriPlane::new(levels)
}

/// Records the multi-scale query of `points` (`[P, 3]`) as a `[P, ΣC]` var.
pub fn sample_multiscale_graph(g: &mut Graph, levels: &[[Var; 3]], points: Var, extent: f64) -> Result<Var> {
    let per_level = levels
        .iter()
        .map(|planes| g.triplane_sample(*planes, points, extent))
        .collect::<Result<Vec<_>>>()?;
    if per_level.len() == 1 {
        return Ok(per_level[0]);
    }
    g.concat(&per_level, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_level(c: usize, res: usize, extent: f64, seed: u64) -> TriPlaneLevel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = [0, 1, 2].map(|_| {
            let mut t = nn::normal_tensor(&[c, res, res], 1.0, &mut rng);
            t.requires_grad = false;
            t
        });
        TriPlaneLevel::new(planes, extent).unwrap()
    }

    #[test]
    fn node_query_averages_stored_vectors() {
        let lvl = random_level(2, 5, 1.0, 3);
        // p = (x, y, z) on nodes col 1, row 3 and col 4 of each axis.
        let (x, y, z) = (interp::node_coord(1, 1.0, 5), interp::node_coord(3, 1.0, 5), interp::node_coord(4, 1.0, 5));
        let got = sample_level(&lvl, &[x, y, z]).unwrap();
        for ch in 0..2 {
            let at = |k: usize, row: usize, col: usize| lvl.planes[k].data()[ch * 25 + row * 5 + col];
            let want = (at(0, 3, 1) + at(1, 4, 1) + at(2, 4, 3)) / 3.0;
            assert!((got[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_planes_give_constant() {
        let lvl = TriPlaneLevel::constant(3, 4, 1.0, 0.7);
        for p in [[0.1, 0.2, 0.3], [5.0, -9.0, 0.0], [-1.0, 1.0, 0.999]] {
            assert!(sample_level(&lvl, &p).unwrap().iter().all(|v| (v - 0.7).abs() < 1e-14));
        }
        assert!(sample_level(&lvl, &[f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn multiscale_layout() {
        let a = random_level(4, 4, 1.0, 1);
        let b = random_level(8, 8, 1.0, 2);
        let one = MultiScaleTriPlane::new(vec![a.clone()]).unwrap();
        let p = [0.3, -0.4, 0.1];
        assert_eq!(sample_multiscale(&one, &p).unwrap(), sample_level(&a, &p).unwrap());
        let mut zeroed = b.clone();
        zeroed.planes.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let ms = MultiScaleTriPlane::new(vec![a.clone(), zeroed]).unwrap();
        let f = sample_multiscale(&ms, &p).unwrap();
        assert_eq!(f.len(), 12);
        assert!(f[4..].iter().all(|&v| v == 0.0));
        assert!(f[..4].iter().any(|&v| v != 0.0));
        assert!(MultiScaleTriPlane::new(vec![b, a]).is_err());
    }

    #[test]
    fn identity_transform_keeps_planes() {
        let lvl = random_level(3, 6, 1.5, 4);
        let out = camera_to_world_planes(&lvl, &math::IDENTITY, &[0.0; 3]).unwrap();
        for k in 0..3 {
            assert!(out.planes[k].max_abs_diff(&lvl.planes[k]) < 1e-9);
        }
        let bad = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]];
        assert!(camera_to_world_planes(&lvl, &bad, &[0.0; 3]).is_err());
    }

    #[test]
    fn half_turn_yaw_flips_grids() {
        // Yaw by π maps (x, y, z) to (-x, y, -z): the xy plane flips its
        // columns, xz flips both axes, yz flips its rows.
        let res = 5;
        let lvl = random_level(2, res, 1.0, 5);
        let out = camera_to_world_planes(&lvl, &math::rot_y(std::f64::consts::PI), &[0.0; 3]).unwrap();
        let n = res - 1;
        for ch in 0..2 {
            for r in 0..res {
                for c in 0..res {
                    let at = |t: &Tensor, row: usize, col: usize| t.data()[(ch * res + row) * res + col];
                    assert!((at(&out.planes[0], r, c) - at(&lvl.planes[0], r, n - c)).abs() < 1e-9);
                    assert!((at(&out.planes[1], r, c) - at(&lvl.planes[1], n - r, n - c)).abs() < 1e-9);
                    assert!((at(&out.planes[2], r, c) - at(&lvl.planes[2], n - r, c)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn graph_sampling_matches_pure() {
        let a = random_level(3, 4, 1.0, 8);
        let b = random_level(2, 8, 1.0, 9);
        let ms = MultiScaleTriPlane::new(vec![a.clone(), b.clone()]).unwrap();
        let pts = vec![[0.1, 0.5, -0.3], [1.2, -0.9, 0.0], [-0.77, 0.31, 0.64]];
        let mut g = Graph::new();
        let levels: Vec<[Var; 3]> = [a, b].iter().map(|l| l.planes.clone().map(|t| g.constant(t))).collect();
        let p = g.constant(Tensor::new(vec![3, 3], pts.iter().flatten().copied().collect()).unwrap());
        let f = sample_multiscale_graph(&mut g, &levels, p, 1.0).unwrap();
        assert_eq!(g.shape(f), &[3, 5]);
        for (i, q) in pts.iter().enumerate() {
            let want = sample_multiscale(&ms, q).unwrap();
            for (c, w) in want.iter().enumerate() {
                assert!((g.value(f).data()[i * 5 + c] - w).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn direct_mode_parameter_count() {
        let config = AppearanceConfig {
            resolutions: vec![32],
            channels: vec![8],
            ..Default::default()
        };
        let mut params = ParamSet::new();
        init_params(&config, &mut params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(params.numel(), 3 * 8 * 32 * 32);
        let ms = build_pyramid(&config, &params, 0.2, None).unwrap();
        assert_eq!(ms.levels.len(), 1);
        let direct = MultiScaleTriPlane::from_params(&params, &config).unwrap();
        for k in 0..3 {
            assert_eq!(ms.levels[0].planes[k].data(), direct.levels[0].planes[k].data());
        }
    }

    #[test]
    fn encoder_with_zero_weights_gives_zero_planes() {
        let config = AppearanceConfig {
            mode: AppearanceMode::Encoder,
            resolutions: vec![4, 8],
            channels: vec![2, 3],
            encoder: crate::config::EncoderConfig {
                source_size: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut params = ParamSet::new();
        init_params(&config, &mut params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let img = Tensor::full(&[3, 16, 16], 0.5);
        let cam = Camera::frontal(16, 16, 2.0, 1.2);
        let ms = build_pyramid(&config, &params, 0.2, Some(SourceView { image: &img, camera: &cam })).unwrap();
        assert_eq!(ms.levels.len(), 2);
        assert_eq!(ms.levels[1].resolution(), 8);
        assert_eq!(ms.levels[1].channels(), 3);
        assert!(ms.levels.iter().all(|l| l.planes.iter().all(|p| p.data().iter().all(|&v| v == 0.0))));
        assert!(build_pyramid(&config, &params, 0.2, None).is_err());
    }
}
