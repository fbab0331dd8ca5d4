//! Losses, momentum SGD and the overfitting loop for synthetic scenes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Var};
use crate::deformation;
use crate::error::{Error, Result};
use crate::metrics;
use crate::renderer::{self, Conditioning, Model, RenderOptions};
use crate::scene::Scene;
use crate::tensor::Tensor;

/// Weights of the perceptual and adversarial terms; those terms are not
/// part of this trainer.
pub const LAMBDA_P: f64 = 0.0;
pub const LAMBDA_G: f64 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_rays: usize,
    pub lambda_m: f64,
    pub lambda_r: f64,
    /// Std of the noise on the points seen by the deformation module.
    pub sigma_perturb: f64,
    pub seed: u64,
    pub momentum: f64,
    /// Learning-rate multipliers per parameter group.
    pub plane_lr_scale: f64,
    pub led_lr_scale: f64,
    /// Gradient entries are clipped to `[-clip, clip]`.
    pub grad_clip: f64,
    /// Jittered instead of midpoint samples.
    pub jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            steps: 2000,
            batch_rays: 256,
            lambda_m: 1.0,
            lambda_r: 1e-6,
            sigma_perturb: 0.01,
            seed: 0,
            momentum: 0.9,
            plane_lr_scale: 160.0,
            led_lr_scale: 1.0,
            grad_clip: 1.0,
            jitter: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.steps > 0
            && self.batch_rays > 0
            && self.lambda_m >= 0.0
            && self.lambda_r >= 0.0
            && self.sigma_perturb >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.plane_lr_scale > 0.0
            && self.led_lr_scale > 0.0
            && self.grad_clip > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// Mean squared difference over the selected pixels (every pixel without a
/// mask). Images are `H·W·C` flat with `C` values per pixel.
pub fn mse_loss(pred: &[f64], target: &[f64], channels: usize, mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != target.len() || channels == 0 || !pred.len().is_multiple_of(channels) {
        return Err(Error::shape("mse_loss", format!("{} vs {} values", pred.len(), target.len())));
    }
    let pixels = pred.len() / channels;
    if let Some(m) = mask {
        if m.len() != pixels {
            return Err(Error::shape("mse_loss", format!("mask of {} for {pixels} pixels", m.len())));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pixels {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..channels {
            let d = pred[i * channels + c] - target[i * channels + c];
            sum += d * d;
        }
        count += channels;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("mse mask selects no pixels".into()));
    }
    Ok(sum / count as f64)
}

/// `λ_M · MSE + λ_R · R_D` on values.
pub fn total_loss(pred: &[f64], target: &[f64], delta: &[f64], lambda_m: f64, lambda_r: f64) -> Result<f64> {
    Ok(lambda_m * mse_loss(pred, target, 3, None)? + lambda_r * deformation::deformation_l1(delta))
}

/// Graph form of [`total_loss`]; `pred` and `target` share a shape.
pub fn total_loss_graph(g: &mut Graph, pred: Var, target: Var, delta: Option<Var>, lambda_m: f64, lambda_r: f64) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq);
    let mut loss = g.scale(mse, lambda_m);
    if let Some(d) = delta {
        let rd = deformation::deformation_l1_graph(g, d);
        let rd = g.scale(rd, lambda_r);
        loss = g.add(loss, rd)?;
    }
    Ok(loss)
}

/// Heavy-ball SGD: `v ← βv + g`, `θ ← θ − lr·s·v` with a per-parameter
/// scale `s`.
#[derive(Clone, Debug)]
pub struct Momentum {
    pub beta: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(params: &ParamSet, beta: f64) -> Self {
        Momentum {
            beta,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: impl Fn(&str) -> f64, clip: f64) {
        for ((name, t), v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let rate = lr(name);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for ((x, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = self.beta * *vi + gi.clamp(-clip, clip);
                *x -= rate * *vi;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// PSNR of the step's ray batch.
    pub psnr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,psnr\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.psnr));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetEval {
    pub psnr_masked: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub evals: Vec<TargetEval>,
}

/// Per-target SECC pairs, or `None` for models without deformation.
/// Targets without an expression get the neutral pair.
pub fn scene_pairs(model: &Model, scene: &Scene) -> Result<Option<Vec<Tensor>>> {
    let Some(led) = &model.config.led else {
        return Ok(None);
    };
    let neutral = vec![0.0; scene.spec.morphable().expr_rank()];
    scene
        .targets
        .iter()
        .map(|t| {
            let z = t.z_exp.as_deref().unwrap_or(&neutral);
            scene.secc_pair(z, led.secc_size, model.config.width, model.config.height)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn lr_scale(cfg: &TrainConfig, name: &str) -> f64 {
    if name.starts_with("level") {
        cfg.plane_lr_scale
    } else if name.starts_with("led.") {
        cfg.led_lr_scale
    } else {
        1.0
    }
}

/// Fits `model` to every target of `scene`, cycling through targets one ray
/// batch at a time. Rays are drawn without replacement per epoch.
pub fn train_overfit(model: &mut Model, scene: &Scene, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if scene.targets.is_empty() {
        return Err(Error::InvalidArgument("scene has no targets".into()));
    }
    for t in &scene.targets {
        if (t.camera.width, t.camera.height) != (model.config.width, model.config.height) {
            return Err(Error::InvalidArgument("scene resolution differs from the model's".into()));
        }
    }
    let pairs = scene_pairs(model, scene)?;
    let pixels = model.config.width * model.config.height;
    let batch = cfg.batch_rays.min(pixels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut orders: Vec<Vec<usize>> = vec![(0..pixels).collect(); scene.targets.len()];
    let mut cursors = vec![pixels; scene.targets.len()];
    let mut opt = Momentum::new(&model.params, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut g = Graph::new();

    for step in 0..cfg.steps {
        let ti = step % scene.targets.len();
        if cursors[ti] + batch > pixels {
            orders[ti].shuffle(&mut rng);
            cursors[ti] = 0;
        }
        let rays = orders[ti][cursors[ti]..cursors[ti] + batch].to_vec();
        cursors[ti] += batch;
        let target = &scene.targets[ti];
        let opts = RenderOptions {
            jitter: cfg.jitter.then(|| cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            perturb: (cfg.sigma_perturb > 0.0).then(|| (cfg.sigma_perturb, cfg.seed.wrapping_add(step as u64 + 1))),
            rays: Some(rays.clone()),
            deform: true,
        };
        let cond = Conditioning {
            secc_pair: pairs.as_ref().map(|p| &p[ti]),
            source: None,
        };
        g.clear();
        let vars = renderer::render_graph(&mut g, &model.params, &model.config, &target.camera, cond, &opts)?;
        let pred = g.slice_cols(vars.rgba, 0, 3)?;
        let tgt: Vec<f64> = rays.iter().flat_map(|&r| target.rgb.data[3 * r..3 * r + 3].to_vec()).collect();
        let tgt = g.constant(Tensor::new(vec![batch, 3], tgt)?);
        let loss = total_loss_graph(&mut g, pred, tgt, vars.delta, cfg.lambda_m, cfg.lambda_r)?;
        let loss_value = g.value(loss).item();
        let batch_mse = {
            let p = g.value(pred).data();
            let t = g.value(tgt).data();
            p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
        };
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, loss: loss_value });
        }
        model.params.zero_grad();
        g.backward(loss, &mut model.params)?;
        opt.step(&mut model.params, |name| cfg.lr * lr_scale(cfg, name), cfg.grad_clip);
        log.push(LogRow {
            step,
            loss: loss_value,
            psnr: -10.0 * batch_mse.max(1e-30).log10(),
        });
    }
    let evals = evaluate(model, scene)?;
    Ok(TrainReport { log, evals })
}

/// Full-image masked PSNR and SSIM for every target.
pub fn evaluate(model: &Model, scene: &Scene) -> Result<Vec<TargetEval>> {
    let pairs = scene_pairs(model, scene)?;
    scene
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let cond = Conditioning {
                secc_pair: pairs.as_ref().map(|p| &p[i]),
                source: None,
            };
            let img = renderer::render_image(model, &t.camera, cond)?.rgb_image();
            Ok(TargetEval {
                psnr_masked: metrics::psnr_masked(&img, &t.rgb, &t.mask())?,
                ssim: metrics::ssim(&img, &t.rgb)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let a = vec![0.2; 12];
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert_eq!(mse_loss(&a, &a, 3, None).unwrap(), 0.0);
        assert!((mse_loss(&a, &b, 3, None).unwrap() - 0.01).abs() < 1e-15);
        let mask = [true, false, false, false];
        assert!((mse_loss(&a, &b, 3, Some(&mask)).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse_loss(&a, &b[..9], 3, None).is_err());
    }

    #[test]
    fn total_loss_terms() {
        let a = vec![0.5; 6];
        let b = vec![0.7; 6];
        let d = vec![0.1, -0.2, 0.3];
        let mse = mse_loss(&a, &b, 3, None).unwrap();
        assert_eq!(total_loss(&a, &b, &d, 2.0, 0.0).unwrap(), 2.0 * mse);
        assert_eq!(total_loss(&a, &b, &[0.0; 3], 1.0, 5.0).unwrap(), mse);
        let mut g = Graph::new();
        let (pa, pb, pd) = (
            g.constant(Tensor::new(vec![2, 3], a.clone()).unwrap()),
            g.constant(Tensor::new(vec![2, 3], b.clone()).unwrap()),
            g.constant(Tensor::new(vec![1, 3], d.clone()).unwrap()),
        );
        let l = total_loss_graph(&mut g, pa, pb, Some(pd), 1.0, 0.5).unwrap();
        assert!((g.value(l).item() - total_loss(&a, &b, &d, 1.0, 0.5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn momentum_matches_hand_rolled_recurrence() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(vec![1.0]).with_requires_grad(true));
        let mut opt = Momentum::new(&params, 0.9);
        let (mut x, mut v) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            params.zero_grad();
            params.get_mut("w").unwrap().accumulate_grad(&[2.0 * x]);
            opt.step(&mut params, |_| 0.1, 10.0);
            v = 0.9 * v + 2.0 * x;
            x -= 0.1 * v;
            assert!((params.get("w").unwrap().data()[0] - x).abs() < 1e-15);
        }
    }
}
