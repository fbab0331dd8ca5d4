#![allow(dead_code)]

use tpdr_core::appearance::TriPlaneLevel;
use tpdr_core::geometry::Camera;
use tpdr_core::math::Vec3;
use tpdr_core::raster::{shade, ScreenTriangle};

/// Triangle index and colour per pixel, painted back to front.
pub struct Painted {
    pub triangle: Vec<Option<u32>>,
    pub rgb: Vec<f64>,
}

/// Painter's algorithm at fragment granularity: every covered pixel centre
/// of every triangle is sorted far to near and drawn in that order. Equal
/// depths paint higher triangle indices first so the lowest index ends on
/// top.
pub fn painter(vertices: &[Vec3], triangles: &[[u32; 3]], colors: &[Vec3], camera: &Camera) -> Painted {
    let (w, h) = (camera.width, camera.height);
    let mut frags: Vec<(f64, usize, usize, Vec3)> = Vec::new();
    for (ti, tri) in triangles.iter().enumerate() {
        let Some(st) = ScreenTriangle::project(camera, tri.map(|i| &vertices[i as usize])) else {
            continue;
        };
        for y in 0..h {
            for x in 0..w {
                if let Some((bary, depth)) = st.fragment(x, y) {
                    frags.push((depth, ti, y * w + x, shade(colors, tri, &bary)));
                }
            }
        }
    }
    frags.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let mut out = Painted {
        triangle: vec![None; w * h],
        rgb: vec![0.0; 3 * w * h],
    };
    for (_, ti, pix, c) in frags {
        out.triangle[pix] = Some(ti as u32);
        out.rgb[3 * pix..3 * pix + 3].copy_from_slice(&c);
    }
    out
}

/// Dense bilinear interpolation: every grid node contributes with a tent
/// weight in each axis. Coordinates clamp to the grid border.
pub fn dense_bilinear(grid: &[f64], channels: usize, res: usize, extent: f64, u: f64, v: f64) -> Vec<f64> {
    let to_grid = |x: f64| ((x + extent) / (2.0 * extent) * (res - 1) as f64).clamp(0.0, (res - 1) as f64);
    let (gu, gv) = (to_grid(u), to_grid(v));
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; channels];
    for (c, o) in out.iter_mut().enumerate() {
        for row in 0..res {
            for col in 0..res {
                *o += tent(gu - col as f64) * tent(gv - row as f64) * grid[c * res * res + row * res + col];
            }
        }
    }
    out
}

/// Mean of the `xy`, `xz` and `yz` plane lookups.
pub fn dense_level(level: &TriPlaneLevel, p: &Vec3) -> Vec<f64> {
    let (c, r) = (level.channels(), level.resolution());
    let coords = [(p[0], p[1]), (p[0], p[2]), (p[1], p[2])];
    let mut out = vec![0.0; c];
    for (k, (u, v)) in coords.into_iter().enumerate() {
        let s = dense_bilinear(level.planes[k].data(), c, r, level.extent, u, v);
        for (o, s) in out.iter_mut().zip(s) {
            *o += s / 3.0;
        }
    }
    out
}
