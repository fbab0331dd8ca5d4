//! Parameter initialisation and layer helpers shared by the encoders,
//! the deformation module and the radiance head.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec { cin, cout, kernel, stride: 1 }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches").with_requires_grad(true)
}

/// Inserts `{prefix}.layer{i}.{w|b}` for each conv, He-style scaled. The
/// last layer's weights are further multiplied by `last_scale`.
pub(crate) fn init_conv_stack(params: &mut ParamSet, prefix: &str, specs: &[ConvSpec], last_scale: f64, rng: &mut impl Rng) {
    for (i, s) in specs.iter().enumerate() {
        let fan_in = (s.cin * s.kernel * s.kernel) as f64;
        let mut std = (2.0 / fan_in).sqrt();
        if i + 1 == specs.len() {
            std *= last_scale;
        }
        params.insert(format!("{prefix}.layer{i}.w"), normal_tensor(&[s.cout, s.cin, s.kernel, s.kernel], std, rng));
        params.insert(format!("{prefix}.layer{i}.b"), Tensor::zeros(&[s.cout]).with_requires_grad(true));
    }
}

/// Runs a conv stack with leaky ReLU between layers (none after the last).
pub(crate) fn conv_stack(g: &mut Graph, params: &ParamSet, prefix: &str, specs: &[ConvSpec], slope: f64, mut x: Var) -> Result<Var> {
    for (i, s) in specs.iter().enumerate() {
        let w = g.param_named(params, &format!("{prefix}.layer{i}.w"))?;
        let b = g.param_named(params, &format!("{prefix}.layer{i}.b"))?;
        x = g.conv2d(x, w, Some(b), s.stride, s.pad())?;
        if i + 1 < specs.len() {
            x = g.leaky_relu(x, slope);
        }
    }
    Ok(x)
}
