//! Expression-aware point deformation.
//!
//! Three fully convolutional stacks at the rendering resolution: an
//! expression encoder over the 6-channel SECC pair, a position encoder over
//! the sample points laid out as `H × W × 3N`, and a decoder mapping the
//! concatenated latents to per-point offsets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamSet, Var};
use crate::config::LedConfig;
use crate::error::{Error, Result};
use crate::geometry::PointBatch;
use crate::math;
use crate::nn::{self, ConvSpec};
use crate::tensor::Tensor;

pub const EXPR_PREFIX: &str = "led.expr";
pub const POS_PREFIX: &str = "led.pos";
pub const DEC_PREFIX: &str = "led.dec";

/// Layer shapes of the three stacks for `samples` points per ray.
#[derive(Clone, Debug, PartialEq)]
pub struct LedSpecs {
    pub expr: Vec<ConvSpec>,
    pub pos: Vec<ConvSpec>,
    pub dec: Vec<ConvSpec>,
}

impl LedSpecs {
    pub fn new(cfg: &LedConfig, samples: usize) -> Self {
        let (l, k) = (cfg.latent, cfg.kernel);
        let stack = |cin: usize, layers: usize, cout: usize| -> Vec<ConvSpec> {
            (0..layers)
                .map(|i| {
                    let a = if i == 0 { cin } else { l };
                    let b = if i + 1 == layers { cout } else { l };
                    ConvSpec::same(a, b, k)
                })
                .collect()
        };
        LedSpecs {
            expr: stack(6, cfg.expr_layers, l),
            pos: stack(3 * samples, cfg.pos_layers, l),
            dec: stack(2 * l, cfg.dec_layers, 3 * samples),
        }
    }
}

pub fn init_params(cfg: &LedConfig, samples: usize, params: &mut ParamSet, rng: &mut impl rand::Rng) -> Result<()> {
    cfg.validate()?;
    let s = LedSpecs::new(cfg, samples);
    nn::init_conv_stack(params, EXPR_PREFIX, &s.expr, 1.0, rng);
    nn::init_conv_stack(params, POS_PREFIX, &s.pos, 1.0, rng);
    nn::init_conv_stack(params, DEC_PREFIX, &s.dec, cfg.out_init_scale, rng);
    Ok(())
}

/// Latent expression map `[L, H, W]` from a `[6, H, W]` SECC pair (driving
/// channels first). Not pooled.
pub fn encode_expression(g: &mut Graph, params: &ParamSet, cfg: &LedConfig, slope: f64, pair: Var) -> Result<Var> {
    let s = g.shape(pair).to_vec();
    if s.len() != 3 || s[0] != 6 {
        return Err(Error::shape("encode_expression", format!("SECC pair {s:?}, expected [6, H, W]")));
    }
    let specs = LedSpecs::new(cfg, 1).expr;
    let x = nn::conv_stack(g, params, EXPR_PREFIX, &specs, slope, pair)?;
    Ok(g.leaky_relu(x, slope))
}

/// Latent position map `[L, H, W]` from ray-major points `[H·W·N, 3]`.
pub fn encode_positions(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &LedConfig,
    slope: f64,
    points: Var,
    height: usize,
    width: usize,
    samples: usize,
) -> Result<Var> {
    let s = g.shape(points).to_vec();
    if s != [height * width * samples, 3] {
        return Err(Error::shape(
            "encode_positions",
            format!("points {s:?} for a {height}x{width} image with {samples} samples"),
        ));
    }
    let x = g.reshape(points, &[height, width, 3 * samples])?;
    let x = g.permute(x, &[2, 0, 1])?;
    let specs = LedSpecs::new(cfg, samples).pos;
    let x = nn::conv_stack(g, params, POS_PREFIX, &specs, slope, x)?;
    Ok(g.leaky_relu(x, slope))
}

/// Offsets `[H·W·N, 3]`, ray-major like the input points.
pub fn predict_deformation(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &LedConfig,
    slope: f64,
    expr_latent: Var,
    pos_latent: Var,
    samples: usize,
) -> Result<Var> {
    let (a, b) = (g.shape(expr_latent).to_vec(), g.shape(pos_latent).to_vec());
    if a.len() != 3 || a[1..] != b[1..] {
        return Err(Error::shape("predict_deformation", format!("latents {a:?} and {b:?}")));
    }
    let x = g.concat_channels(&[expr_latent, pos_latent])?;
    let specs = LedSpecs::new(cfg, samples).dec;
    let x = nn::conv_stack(g, params, DEC_PREFIX, &specs, slope, x)?;
    let x = g.permute(x, &[1, 2, 0])?;
    g.reshape(x, &[a[1] * a[2] * samples, 3])
}

/// Full LED pass. `led_input` is what the position encoder sees; callers
/// pass perturbed points here during training and the original points
/// otherwise.
pub fn led_delta_graph(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &LedConfig,
    slope: f64,
    pair: &Tensor,
    led_input: &PointBatch,
) -> Result<Var> {
    let ps = pair.shape();
    if ps.len() != 3 || ps[1] != led_input.height || ps[2] != led_input.width {
        return Err(Error::shape(
            "led",
            format!("SECC pair {ps:?} for a {}x{} point grid", led_input.height, led_input.width),
        ));
    }
    let pair = g.constant(pair.clone());
    let n = led_input.positions.len();
    let pts = g.constant(Tensor::new(vec![n, 3], led_input.flat_positions())?);
    let e = encode_expression(g, params, cfg, slope, pair)?;
    let p = encode_positions(g, params, cfg, slope, pts, led_input.height, led_input.width, led_input.samples)?;
    predict_deformation(g, params, cfg, slope, e, p, led_input.samples)
}

/// Offsets together with the points they were applied to.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationBatch {
    /// `H·W·N` offsets, ray-major.
    pub delta: Vec<math::Vec3>,
    pub p_original: PointBatch,
    pub p_deformed: Vec<math::Vec3>,
}

/// Value-only LED evaluation. With `sigma > 0` the encoder sees perturbed
/// points, but offsets are always added to `points` itself.
pub fn deform_points(
    params: &ParamSet,
    cfg: &LedConfig,
    slope: f64,
    pair: &Tensor,
    points: &PointBatch,
    sigma: f64,
    seed: u64,
) -> Result<DeformationBatch> {
    let noisy = perturb_points(points, sigma, seed)?;
    let mut g = Graph::new();
    let d = led_delta_graph(&mut g, params, cfg, slope, pair, &noisy)?;
    let delta: Vec<math::Vec3> = g.value(d).data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    if let Some(i) = delta.iter().flatten().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "deformation".into(),
            index: i,
        });
    }
    let p_deformed = points.positions.iter().zip(&delta).map(|(p, d)| math::add(p, d)).collect();
    Ok(DeformationBatch {
        delta,
        p_original: points.clone(),
        p_deformed,
    })
}

/// Adds `N(0, sigma²)` noise to every coordinate. Depths are kept.
pub fn perturb_points(points: &PointBatch, sigma: f64, seed: u64) -> Result<PointBatch> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("perturbation sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(points.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).expect("validated sigma");
    let mut out = points.clone();
    for p in out.positions.iter_mut() {
        for c in p.iter_mut() {
            *c += dist.sample(&mut rng);
        }
    }
    Ok(out)
}

/// `Σ |Δ|` over every component.
pub fn deformation_l1(delta: &[f64]) -> f64 {
    delta.iter().map(|v| v.abs()).sum()
}

/// Graph form of [`deformation_l1`].
pub fn deformation_l1_graph(g: &mut Graph, delta: Var) -> Var {
    let a = g.abs(delta);
    g.sum(a)
}
