//! Bilinear lookup on square feature grids spanning `[-extent, extent]²`.
//!
//! Grid layout is `[C, R, R]` with row index following the second plane
//! coordinate and column index the first. Node `(row, col)` sits at world
//! coordinate `-extent + 2·extent·col/(R-1)` (corners aligned). Queries
//! outside the extent clamp to the border.

/// Four bilinear taps into a single-channel `R×R` grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Taps {
    /// Flat `row * R + col` node indices.
    pub idx: [usize; 4],
    pub w: [f64; 4],
    /// Derivative of each weight with respect to the first plane coordinate.
    pub dw_du: [f64; 4],
    /// Derivative of each weight with respect to the second plane coordinate.
    pub dw_dv: [f64; 4],
}

/// Continuous grid coordinate and its derivative with respect to the world
/// coordinate; the derivative is zero where the border clamp is active.
fn grid_coord(x: f64, extent: f64, res: usize) -> (f64, f64) {
    let scale = (res - 1) as f64 / (2.0 * extent);
    let g = (x + extent) * scale;
    if g <= 0.0 {
        (0.0, 0.0)
    } else if g >= (res - 1) as f64 {
        ((res - 1) as f64, 0.0)
    } else {
        (g, scale)
    }
}

pub(crate) fn taps(u: f64, v: f64, extent: f64, res: usize) -> Taps {
    debug_assert!(res >= 2);
    let (gu, su) = grid_coord(u, extent, res);
    let (gv, sv) = grid_coord(v, extent, res);
    let c0 = (gu.floor() as usize).min(res - 2);
    let r0 = (gv.floor() as usize).min(res - 2);
    let fu = gu - c0 as f64;
    let fv = gv - r0 as f64;
    let base = r0 * res + c0;
    Taps {
        idx: [base, base + 1, base + res, base + res + 1],
        w: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        dw_du: [-(1.0 - fv) * su, (1.0 - fv) * su, -fv * su, fv * su],
        dw_dv: [-(1.0 - fu) * sv, -fu * sv, (1.0 - fu) * sv, fu * sv],
    }
}

/// World coordinate of grid node `i` along one axis.
pub(crate) fn node_coord(i: usize, extent: f64, res: usize) -> f64 {
    -extent + 2.0 * extent * i as f64 / (res - 1) as f64
}

/// Sample every channel of a `[C, R, R]` grid at plane coordinate `(u, v)`,
/// adding `scale * value` into `out`.
pub(crate) fn sample_into(grid: &[f64], channels: usize, res: usize, t: &Taps, scale: f64, out: &mut [f64]) {
    let plane = res * res;
    for (c, o) in out.iter_mut().enumerate().take(channels) {
        let g = &grid[c * plane..(c + 1) * plane];
        let mut acc = 0.0;
        for k in 0..4 {
            acc += t.w[k] * g[t.idx[k]];
        }
        *o += scale * acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity() {
        for &(u, v) in &[(0.1, -0.3), (0.999, 0.999), (-2.0, 5.0), (0.0, 0.0)] {
            let t = taps(u, v, 1.0, 8);
            assert!((t.w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(t.dw_du.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn nodes_are_exact() {
        let res = 5;
        for i in 0..res {
            let x = node_coord(i, 2.0, res);
            let t = taps(x, x, 2.0, res);
            let hit = t.w.iter().position(|&w| (w - 1.0).abs() < 1e-12).unwrap();
            assert_eq!(t.idx[hit], i * res + i);
        }
    }
}
