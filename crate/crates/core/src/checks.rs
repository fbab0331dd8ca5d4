//! Finite-difference gradient checks of the full rendering loss, one
//! parameter group at a time.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::appearance::SourceView;
use crate::autodiff::{finite_difference_check, GradCheckReport, Graph, ParamSet, Var};
use crate::config::{AppearanceConfig, AppearanceMode, EncoderConfig, LedConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::morphable::{MorphableModel, ToyHeadSpec};
use crate::raster;
use crate::renderer::{self, Conditioning, Model, RenderOptions};
use crate::tensor::Tensor;
use crate::training;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Planes,
    Led,
    Head,
    Encoder,
    All,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Planes,
        Component::Led,
        Component::Head,
        Component::Encoder,
        Component::All,
    ];

    fn prefix(self) -> Option<&'static str> {
        match self {
            Component::Planes => Some("level"),
            Component::Led => Some("led."),
            Component::Head => Some("head."),
            Component::Encoder => Some("enc."),
            Component::All => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Component::Planes => "planes",
            Component::Led => "led",
            Component::Head => "head",
            Component::Encoder => "encoder",
            Component::All => "all",
        };
        f.write_str(s)
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown component {s:?}; expected planes, led, head, encoder or all")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub component: Component,
    pub passed: bool,
    pub tolerance: f64,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

/// A small model with every differentiable piece enabled: 4×4 pixels, four
/// samples per ray, two plane levels.
pub fn tiny_config(mode: AppearanceMode) -> ModelConfig {
    ModelConfig {
        width: 4,
        height: 4,
        samples_per_ray: 4,
        pe_levels: 2,
        hidden: 8,
        appearance: AppearanceConfig {
            mode,
            resolutions: vec![4, 8],
            channels: vec![2, 2],
            init_std: 0.3,
            encoder: EncoderConfig {
                source_size: 16,
                feature_channels: 3,
                psi_hidden: 3,
                ..Default::default()
            },
            ..Default::default()
        },
        led: (mode == AppearanceMode::Direct).then(|| LedConfig {
            latent: 4,
            out_init_scale: 1.0,
            ..Default::default()
        }),
        ..Default::default()
    }
}

struct Fixture {
    config: ModelConfig,
    camera: Camera,
    pair: Option<Tensor>,
    source_image: Tensor,
    source_camera: Camera,
    target: Tensor,
}

fn fixture(component: Component, seed: u64) -> Result<(Fixture, ParamSet)> {
    let mode = if component == Component::Encoder {
        AppearanceMode::Encoder
    } else {
        AppearanceMode::Direct
    };
    let config = tiny_config(mode);
    let model = Model::init(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let camera = Camera::frontal(4, 4, 2.0, 1.0).orbit(0.2, 0.1, &[0.0; 3]);
    let pair = match &config.led {
        Some(_) => {
            let face: MorphableModel = ToyHeadSpec::default().build(crate::morphable::TOY_SEED);
            let mut z_exp = vec![0.0; face.expr_rank()];
            z_exp[0] = 1.0;
            let rig = Camera::frontal(16, 16, 2.0, 1.0);
            let p = raster::make_secc_pair(&face, &vec![0.0; face.shape_rank()], &z_exp, &rig)?;
            Some(raster::secc_pair_tensor(&p, 4, 4)?)
        }
        None => None,
    };
    let source_image = Tensor::new(vec![3, 16, 16], (0..3 * 256).map(|_| rng.random::<f64>()).collect())?;
    let target = Tensor::new(vec![16, 3], (0..48).map(|_| rng.random::<f64>()).collect())?;
    let mut params = model.params;
    if let Some(prefix) = component.prefix() {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            params.get_mut(&n)?.requires_grad = n.starts_with(prefix);
        }
    }
    Ok((
        Fixture {
            config,
            camera,
            pair,
            source_image,
            source_camera: Camera::frontal(16, 16, 2.0, 1.0).orbit(0.3, 0.0, &[0.0; 3]),
            target,
        },
        params,
    ))
}

fn loss(fx: &Fixture, g: &mut Graph, params: &ParamSet) -> Result<Var> {
    let cond = Conditioning {
        secc_pair: fx.pair.as_ref(),
        source: (fx.config.appearance.mode == AppearanceMode::Encoder).then_some(SourceView {
            image: &fx.source_image,
            camera: &fx.source_camera,
        }),
    };
    let vars = renderer::render_graph(g, params, &fx.config, &fx.camera, cond, &RenderOptions::default())?;
    let pred = g.slice_cols(vars.rgba, 0, 3)?;
    let target = g.constant(fx.target.clone());
    training::total_loss_graph(g, pred, target, vars.delta, 1.0, 1e-3)
}

/// Compares analytic and central-difference gradients of the rendering
/// loss with respect to one parameter group (or all of them).
pub fn gradcheck_component(component: Component, seed: u64) -> Result<ComponentReport> {
    let (fx, mut params) = fixture(component, seed)?;
    let report = finite_difference_check(|g, p| loss(&fx, g, p), &mut params, STEP)?;
    Ok(ComponentReport {
        component,
        passed: report.max_rel_error < TOLERANCE && report.entries_checked > 0,
        tolerance: TOLERANCE,
        report,
    })
}
