//! Central-difference checks of every differentiable graph op and of the
//! full rendering loss per parameter group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpdr_core::autodiff::{finite_difference_check, Graph, ParamSet, Var};
use tpdr_core::checks::{gradcheck_component, Component, STEP, TOLERANCE};
use tpdr_core::{Result, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn params(rng: &mut ChaCha8Rng, entries: &[(&str, &[usize])]) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, shape) in entries {
        p.insert(*name, random(rng, shape, -1.0, 1.0).with_requires_grad(true));
    }
    p
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every
/// output entry carries a distinct cotangent.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = g.constant(Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect())?);
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn check(mut p: ParamSet, f: impl Fn(&mut Graph, &ParamSet) -> Result<Var>) {
    let r = finite_difference_check(f, &mut p, STEP).unwrap();
    assert!(r.entries_checked > 0);
    assert!(r.max_rel_error < TOLERANCE, "{r:?}");
}

#[test]
fn dense_layer_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = params(&mut rng, &[("x", &[5, 4]), ("w", &[4, 3]), ("b", &[3])]);
    check(p, |g, p| {
        let x = g.param_named(p, "x")?;
        let w = g.param_named(p, "w")?;
        let b = g.param_named(p, "b")?;
        let y = g.matmul(x, w)?;
        let y = g.add_bias(y, b)?;
        let y = g.leaky_relu(y, 0.2);
        let s = g.sigmoid(y);
        let t = g.softplus(y);
        let u = g.sub(s, t)?;
        let u = g.scale(u, 1.5);
        let v = g.abs(u);
        let z = g.add(v, y)?;
        project(g, z)
    });
}

#[test]
fn conv_with_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = params(&mut rng, &[("x", &[2, 7, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])]);
    check(p, |g, p| {
        let x = g.param_named(p, "x")?;
        let w = g.param_named(p, "w")?;
        let b = g.param_named(p, "b")?;
        let y = g.conv2d(x, w, Some(b), 2, 1)?;
        let z = g.conv2d(x, w, None, 1, 0)?;
        let (a, b) = (project(g, y)?, project(g, z)?);
        g.add(a, b)
    });
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params(&mut rng, &[("a", &[2, 3, 3]), ("b", &[1, 6, 6])]);
    check(p, |g, p| {
        let a = g.param_named(p, "a")?;
        let b = g.param_named(p, "b")?;
        let up = g.upsample2x_nearest(a)?;
        let cat = g.concat_channels(&[up, b])?;
        let perm = g.permute(cat, &[1, 2, 0])?;
        let flat = g.reshape(perm, &[36, 3])?;
        let rows = g.gather_rows(flat, &[0, 5, 5, 35, 17])?;
        let cols = g.slice_cols(rows, 1, 3)?;
        let m = g.mean(cols);
        let s = project(g, flat)?;
        g.add(m, s)
    });
}

#[test]
fn triplane_sampling_in_planes_and_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = params(&mut rng, &[("xy", &[2, 5, 5]), ("xz", &[2, 5, 5]), ("yz", &[2, 5, 5])]);
    p.insert("pts", random(&mut rng, &[9, 3], -0.9, 0.9).with_requires_grad(true));
    check(p, |g, p| {
        let planes = [g.param_named(p, "xy")?, g.param_named(p, "xz")?, g.param_named(p, "yz")?];
        let pts = g.param_named(p, "pts")?;
        let f = g.triplane_sample(planes, pts, 1.0)?;
        project(g, f)
    });
}

#[test]
fn plane_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = params(&mut rng, &[("x", &[2, 4, 4])]);
    let coords: Vec<(f64, f64)> = (0..9).map(|_| (rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2))).collect();
    check(p, move |g, p| {
        let x = g.param_named(p, "x")?;
        let y = g.resample_plane(x, &coords, 3, 1.0)?;
        project(g, y)
    });
}

#[test]
fn compositing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = params(&mut rng, &[("rgb", &[3, 5, 3])]);
    p.insert("sigma", random(&mut rng, &[3, 5], 0.0, 3.0).with_requires_grad(true));
    let deltas: Vec<f64> = (0..15).map(|_| rng.random_range(0.05..0.4)).collect();
    check(p, move |g, p| {
        let rgb = g.param_named(p, "rgb")?;
        let sigma = g.param_named(p, "sigma")?;
        let out = g.composite(rgb, sigma, &deltas)?;
        project(g, out)
    });
}

#[test]
fn every_component_on_two_seeds() {
    for seed in [1, 2] {
        for c in Component::ALL {
            let r = gradcheck_component(c, seed).unwrap();
            assert!(r.passed, "{c} seed {seed}: {:?}", r.report);
        }
    }
}
