//! Raw loops behind the graph operations. Everything here works on flat
//! row-major slices; shape validation happens in the graph layer.

/// `out[m,n] = Σ_p x[i,p]·y[p,j]` with explicit row/column strides, so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, x: &[f64], rsx: isize, csx: isize, y: &[f64], rsy: isize, csy: isize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: the strides describe in-bounds views of `x` (m×k) and `y`
    // (k×n), checked by the callers' length contracts; `out` is m×n dense.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            x.as_ptr(),
            rsx,
            csx,
            y.as_ptr(),
            rsy,
            csy,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == k * n);
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1)
}

/// `g[m,n] · bᵀ` giving `[m,k]`.
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(g.len() == m * n && b.len() == k * n);
    gemm(m, n, k, g, n as isize, 1, b, 1, n as isize)
}

/// `aᵀ · g` giving `[k,n]`.
pub(crate) fn matmul_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && g.len() == m * n);
    gemm(k, m, n, a, 1, k as isize, g, n as isize, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Output index range `[lo, hi)` along one axis whose input tap at
    /// kernel offset `kk` lands inside `[0, len)`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off <= len-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_incl = (len as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_len as isize);
        (lo.min(out_len as isize) as usize, hi.max(lo.min(out_len as isize)) as usize)
    }
}

pub(crate) fn conv2d(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let (rows, n) = (g.cin * g.k * g.k, g.ho * g.wo);
    let mut out = matmul(wt, &cols, g.cout, rows, n);
    if let Some(b) = bias {
        for (plane, bv) in out.chunks_mut(n).zip(b) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Unfolds input patches into a `[cin·k·k, ho·wo]` matrix (zeros where the
/// kernel hangs over the padding).
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.k * g.k * n];
    for ci in 0..g.cin {
        let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid(kx, g.w, g.wo);
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        orow[ox] = xrow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let xin = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid(kx, g.w, g.wo);
                let row = &cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox0..ox1 {
                        xin[iy * g.w + ox * g.stride + kx - g.pad] += row[oy * g.wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    grad: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (rows, n) = (g.cin * g.k * g.k, g.ho * g.wo);
    let cols = im2col(x, g);
    let db = grad.chunks(n).map(|p| p.iter().sum()).collect();
    // dW = grad · colsᵀ, dcols = Wᵀ · grad
    let dw = matmul_grad_a(grad, &cols, g.cout, rows, n);
    let dcols = matmul_grad_b(wt, grad, g.cout, rows, n);
    (col2im(&dcols, g), dw, db)
}

/// Index mapping for a generic axis permutation: `out[i] = x[map[i]]`.
pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    for _ in 0..numel {
        let src: usize = (0..nd).map(|d| idx[d] * strides[perm[d]]).sum();
        map.push(src);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
