//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every executed operation in order. Leaves either
//! hold constants or copies of [`ParamSet`] entries; `backward` walks the
//! record in exact reverse order and accumulates gradients into the
//! `ParamSet` tensors that have `requires_grad` set, then clears itself.

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::interp;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Upsample2x(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    TriPlane {
        planes: [Var; 3],
        points: Var,
        extent: f64,
    },
    Resample {
        x: Var,
        res_in: usize,
        taps: Vec<interp::Taps>,
    },
    Composite {
        rgb: Var,
        sigma: Var,
        deltas: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered operation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf(None), false)
    }

    /// Records a copy of a parameter. Gradients reach it only when its
    /// `requires_grad` flag is set.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let t = params.by_id(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf(Some(id)), t.requires_grad)
    }

    pub fn param_named(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        Ok(self.param(params, params.id(name)?))
    }

    fn binary_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        check(self.shape(a) == self.shape(b), op, || {
            format!("{:?} vs {:?}", self.shape(a), self.shape(b))
        })?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, mk(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let ng = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, s), ng)
    }

    /// `x[..., C] + bias[C]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        check(self.shape(bias) == [c], "add_bias", || {
            format!("input {:?} with bias {:?}", self.shape(x), self.shape(bias))
        })?;
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let ng = self.ng(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddBias(x, bias), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul", || {
            format!("{sa:?} x {sb:?}")
        })?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), ng))
    }

    /// 2-D convolution of a `[Cin, H, W]` map with `[Cout, Cin, K, K]`
    /// weights, zero padding and optional `[Cout]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        check(sx.len() == 3 && sw.len() == 4 && sw[1] == sx[0] && sw[2] == sw[3], "conv2d", || {
            format!("input {sx:?} with weight {sw:?}")
        })?;
        if let Some(b) = b {
            check(self.shape(b) == [sw[0]], "conv2d", || {
                format!("bias {:?} for {} output channels", self.shape(b), sw[0])
            })?;
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sw[0], sw[2], stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {} stride {stride} pad {pad} does not fit input {sx:?}", sw[2]),
            )
        })?;
        let data = kernels::conv2d(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(vec![geom.cout, geom.ho, geom.wo], data, Op::Conv2d { x, w, b, geom }, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), data, op, ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Nearest-neighbour 2× upsampling of a `[C, H, W]` map.
    pub fn upsample2x_nearest(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check(s.len() == 3, "upsample2x_nearest", || format!("expected [C,H,W], got {s:?}"))?;
        let (c, h, w) = (s[0], s[1], s[2]);
        let x = self.data(a);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample2x(a), ng))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        check(!inputs.is_empty(), "concat", || "no inputs".into())?;
        let first = self.shape(inputs[0]).to_vec();
        check(axis < first.len(), "concat", || format!("axis {axis} out of range for {first:?}"))?;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            check(ok, "concat", || format!("{first:?} vs {s:?} along axis {axis}"))?;
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.ng(inputs);
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, ng))
    }

    /// Channel concatenation of `[C_i, H, W]` maps.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        check(numel == self.value(a).numel(), "reshape", || {
            format!("{:?} to {shape:?}", self.shape(a))
        })?;
        let data = self.data(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len() && perm.iter().all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        check(valid, "permute", || format!("{perm:?} is not a permutation of {s:?}"))?;
        let (shape, map) = kernels::permute_map(&s, perm);
        let x = self.data(a);
        let data = map.iter().map(|&i| x[i]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(shape, data, Op::Permute { x: a, map }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        let ng = self.ng(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), ng)
    }

    /// Selects rows along the first axis.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check(!s.is_empty(), "gather_rows", || "scalar input".into())?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let x = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&x[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let ng = self.ng(&[a]);
        Ok(self.push(shape, out, Op::GatherRows { x: a, rows: rows.to_vec() }, ng))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check(s.len() == 2 && start < end && end <= s[1], "slice_cols", || {
            format!("[{start}, {end}) of {s:?}")
        })?;
        let x = self.data(a);
        let out = x.chunks(s[1]).flat_map(|row| row[start..end].iter().copied()).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(vec![s[0], end - start], out, Op::SliceCols { x: a, start }, ng))
    }

    /// Tri-plane feature query: `points` is `[P, 3]`, each plane `[C, R, R]`
    /// ordered `xy, xz, yz`. Returns the `[P, C]` average of the three
    /// bilinear lookups. Differentiable in both the planes and the points.
    pub fn triplane_sample(&mut self, planes: [Var; 3], points: Var, extent: f64) -> Result<Var> {
        let ps = self.shape(planes[0]).to_vec();
        check(ps.len() == 3 && ps[1] == ps[2] && ps[1] >= 2, "triplane_sample", || {
            format!("plane shape {ps:?} must be [C, R, R] with R >= 2")
        })?;
        for p in &planes[1..] {
            check(self.shape(*p) == ps.as_slice(), "triplane_sample", || {
                format!("planes disagree: {ps:?} vs {:?}", self.shape(*p))
            })?;
        }
        let qs = self.shape(points).to_vec();
        check(qs.len() == 2 && qs[1] == 3, "triplane_sample", || format!("points {qs:?} must be [P, 3]"))?;
        check(extent > 0.0, "triplane_sample", || format!("extent {extent} must be positive"))?;
        let (c, res) = (ps[0], ps[1]);
        let pts = self.data(points);
        if let Some(i) = pts.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "triplane query point".into(),
                index: i / 3,
            });
        }
        let mut out = vec![0.0; qs[0] * c];
        for (i, p) in pts.chunks(3).enumerate() {
            let o = &mut out[i * c..(i + 1) * c];
            for (k, (u, v)) in plane_coords(p).into_iter().enumerate() {
                let t = interp::taps(u, v, extent, res);
                interp::sample_into(self.data(planes[k]), c, res, &t, 1.0 / 3.0, o);
            }
        }
        let ng = self.ng(&[planes[0], planes[1], planes[2], points]);
        Ok(self.push(vec![qs[0], c], out, Op::TriPlane { planes, points, extent }, ng))
    }

    /// Bilinear resampling of a `[C, R, R]` grid at arbitrary plane
    /// coordinates, one per output node. Output is `[C, out_res, out_res]`.
    pub fn resample_plane(&mut self, x: Var, coords: &[(f64, f64)], out_res: usize, extent: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check(s.len() == 3 && s[1] == s[2] && s[1] >= 2, "resample_plane", || format!("grid {s:?}"))?;
        check(coords.len() == out_res * out_res, "resample_plane", || {
            format!("{} coordinates for a {out_res}x{out_res} output", coords.len())
        })?;
        let (c, res) = (s[0], s[1]);
        let taps: Vec<_> = coords.iter().map(|&(u, v)| interp::taps(u, v, extent, res)).collect();
        let src = self.data(x);
        let n = out_res * out_res;
        let mut out = vec![0.0; c * n];
        let mut tmp = vec![0.0; c];
        for (j, t) in taps.iter().enumerate() {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            interp::sample_into(src, c, res, t, 1.0, &mut tmp);
            for ch in 0..c {
                out[ch * n + j] = tmp[ch];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![c, out_res, out_res], out, Op::Resample { x, res_in: res, taps }, ng))
    }

    /// Emission-absorption compositing along rays. `rgb` is `[R, N, 3]`,
    /// `sigma` is `[R, N]`, `deltas` the `R·N` segment lengths. Output is
    /// `[R, 4]`: composited color followed by accumulated opacity.
    pub fn composite(&mut self, rgb: Var, sigma: Var, deltas: &[f64]) -> Result<Var> {
        let (sr, ss) = (self.shape(rgb).to_vec(), self.shape(sigma).to_vec());
        check(sr.len() == 3 && sr[2] == 3 && ss == sr[..2], "composite", || {
            format!("rgb {sr:?} with sigma {ss:?}")
        })?;
        check(deltas.len() == ss[0] * ss[1], "composite", || {
            format!("{} deltas for sigma {ss:?}", deltas.len())
        })?;
        let (rays, n) = (ss[0], ss[1]);
        let (c, s) = (self.data(rgb), self.data(sigma));
        let mut out = vec![0.0; rays * 4];
        for r in 0..rays {
            let mut trans = 1.0;
            let o = &mut out[r * 4..(r + 1) * 4];
            for i in 0..n {
                let k = r * n + i;
                let next = trans * (-s[k] * deltas[k]).exp();
                let w = trans - next;
                for ch in 0..3 {
                    o[ch] += w * c[k * 3 + ch];
                }
                trans = next;
            }
            o[3] = 1.0 - trans;
        }
        let ng = self.ng(&[rgb, sigma]);
        Ok(self.push(
            vec![rays, 4],
            out,
            Op::Composite {
                rgb,
                sigma,
                deltas: deltas.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients of every reachable
    /// trainable leaf are added into `params`; the graph is cleared.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf(Some(id)) = self.nodes[idx].op {
                params.by_id_mut(id).accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        self.nodes.clear();
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(xb).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(xa).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::AddBias(x, b) => {
                let c = self.value(*b).numel();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*x, g.to_vec());
                send(*b, db);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].needs_grad {
                    send(*a, kernels::matmul_grad_a(g, self.data(*b), m, k, n));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, kernels::matmul_grad_b(self.data(*a), g, m, k, n));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.data(*x), self.data(*w), g, geom);
                send(*x, dx);
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.data(*a);
                send(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { g * slope }).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softplus(a) => {
                let x = self.data(*a);
                send(*a, g.iter().zip(x).map(|(g, &x)| g * kernels::sigmoid(x)).collect());
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                send(*a, g.iter().zip(x).map(|(g, &x)| g * sign(x)).collect());
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                send(*a, dx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    send(v, d);
                    offset += chunk;
                }
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Permute { x, map } => {
                let mut dx = vec![0.0; g.len()];
                for (gv, &src) in g.iter().zip(map) {
                    dx[src] = *gv;
                }
                send(*x, dx);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::GatherRows { x, rows } => {
                let s = self.shape(*x);
                let inner: usize = s[1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..inner {
                        dx[r * inner + j] += g[i * inner + j];
                    }
                }
                send(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let width = node.value.shape()[1];
                let mut dx = vec![0.0; s[0] * s[1]];
                for r in 0..s[0] {
                    dx[r * s[1] + start..r * s[1] + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                send(*x, dx);
            }
            Op::TriPlane { planes, points, extent } => {
                let ps = self.shape(planes[0]);
                let (c, res) = (ps[0], ps[1]);
                let plane_len = res * res;
                let pts = self.data(*points);
                let want_planes = planes.iter().any(|p| self.nodes[p.0].needs_grad);
                let want_points = self.nodes[points.0].needs_grad;
                let mut dplanes = if want_planes { vec![vec![0.0; c * plane_len]; 3] } else { Vec::new() };
                let mut dpts = vec![0.0; if want_points { pts.len() } else { 0 }];
                let third = 1.0 / 3.0;
                for (i, p) in pts.chunks(3).enumerate() {
                    let gi = &g[i * c..(i + 1) * c];
                    for (k, (u, v)) in plane_coords(p).into_iter().enumerate() {
                        let t = interp::taps(u, v, *extent, res);
                        if want_planes {
                            let dp = &mut dplanes[k];
                            for ch in 0..c {
                                let gv = gi[ch] * third;
                                for q in 0..4 {
                                    dp[ch * plane_len + t.idx[q]] += gv * t.w[q];
                                }
                            }
                        }
                        if want_points {
                            let grid = self.data(planes[k]);
                            let (mut du, mut dv) = (0.0, 0.0);
                            for ch in 0..c {
                                let base = ch * plane_len;
                                for q in 0..4 {
                                    let f = grid[base + t.idx[q]] * gi[ch];
                                    du += f * t.dw_du[q];
                                    dv += f * t.dw_dv[q];
                                }
                            }
                            let (a0, a1) = PLANE_AXES[k];
                            dpts[i * 3 + a0] += du * third;
                            dpts[i * 3 + a1] += dv * third;
                        }
                    }
                }
                for (k, d) in dplanes.into_iter().enumerate() {
                    send(planes[k], d);
                }
                if want_points {
                    send(*points, dpts);
                }
            }
            Op::Resample { x, res_in, taps } => {
                let c = node.value.shape()[0];
                let n = taps.len();
                let plane_len = res_in * res_in;
                let mut dx = vec![0.0; c * plane_len];
                for (j, t) in taps.iter().enumerate() {
                    for ch in 0..c {
                        let gv = g[ch * n + j];
                        for q in 0..4 {
                            dx[ch * plane_len + t.idx[q]] += gv * t.w[q];
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Composite { rgb, sigma, deltas } => {
                let ss = self.shape(*sigma);
                let (rays, n) = (ss[0], ss[1]);
                let (c, s) = (self.data(*rgb), self.data(*sigma));
                let mut dc = vec![0.0; c.len()];
                let mut ds = vec![0.0; s.len()];
                let mut trans = vec![0.0; n + 1];
                for r in 0..rays {
                    let gr = &g[r * 4..(r + 1) * 4];
                    trans[0] = 1.0;
                    for i in 0..n {
                        let k = r * n + i;
                        trans[i + 1] = trans[i] * (-s[k] * deltas[k]).exp();
                    }
                    // suffix = Σ_{i>k} w_i (g·c_i + g_alpha)
                    let mut suffix = 0.0;
                    for i in (0..n).rev() {
                        let k = r * n + i;
                        let w = trans[i] - trans[i + 1];
                        let proj = gr[0] * c[k * 3] + gr[1] * c[k * 3 + 1] + gr[2] * c[k * 3 + 2] + gr[3];
                        for ch in 0..3 {
                            dc[k * 3 + ch] = w * gr[ch];
                        }
                        ds[k] = deltas[k] * (trans[i + 1] * proj - suffix);
                        suffix += w * proj;
                    }
                }
                send(*rgb, dc);
                send(*sigma, ds);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Axis pairs for the `xy`, `xz`, `yz` planes.
pub(crate) const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

pub(crate) fn plane_coords(p: &[f64]) -> [(f64, f64); 3] {
    PLANE_AXES.map(|(a, b)| (p[a], p[b]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, s, d) in entries {
            p.insert(*n, Tensor::new(s.clone(), d.clone()).unwrap().with_requires_grad(true));
        }
        p
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.0));
        let b = g.constant(Tensor::full(&[3, 2], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn identity_conv_is_identity() {
        let mut g = Graph::new();
        let img: Vec<f64> = (0..2 * 4 * 5).map(|i| (i as f64).sin()).collect();
        let x = g.constant(Tensor::new(vec![2, 4, 5], img.clone()).unwrap());
        let w = g.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), img.as_slice());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut p = ps(&[("x", vec![3], vec![0.5, -1.0, 2.0])]);
        let mut g = Graph::new();
        let x = g.param_named(&p, "x").unwrap();
        let l = g.sum(x);
        g.backward(l, &mut p).unwrap();
        assert_eq!(p.get("x").unwrap().grad().unwrap(), &[1.0, 1.0, 1.0]);
        assert!(g.is_empty());
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut p = ps(&[("x", vec![2], vec![1.0, 2.0])]);
        for round in 1..=2 {
            let mut g = Graph::new();
            let x = g.param_named(&p, "x").unwrap();
            let sq = g.mul(x, x).unwrap();
            let l = g.sum(sq);
            g.backward(l, &mut p).unwrap();
            let k = round as f64;
            assert_eq!(p.get("x").unwrap().grad().unwrap(), &[2.0 * k, 4.0 * k]);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut p = ParamSet::new();
        let mut g = Graph::new();
        let dummy = Var(0);
        assert!(g.backward(dummy, &mut p).is_err());
        let a = g.constant(Tensor::zeros(&[2]));
        assert!(g.backward(a, &mut p).is_err());
    }

    #[test]
    fn composite_vacuum_and_opaque() {
        let mut g = Graph::new();
        let rgb = g.constant(Tensor::new(vec![1, 2, 3], vec![0.2, 0.4, 0.6, 1.0, 1.0, 1.0]).unwrap());
        let zero = g.constant(Tensor::zeros(&[1, 2]));
        let out = g.composite(rgb, zero, &[0.5, 0.5]).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 4]);
        let dense = g.constant(Tensor::new(vec![1, 2], vec![1e4, 0.0]).unwrap());
        let out = g.composite(rgb, dense, &[0.5, 0.5]).unwrap();
        let v = g.value(out).data();
        assert!((v[0] - 0.2).abs() < 1e-12 && (v[3] - 1.0).abs() < 1e-12);
    }
}
