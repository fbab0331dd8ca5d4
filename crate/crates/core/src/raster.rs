//! Software Z-buffer rasterizer and SECC rendering.
//!
//! Coverage is tested at pixel centres `(x + 0.5, y + 0.5)` with a top-left
//! fill rule, so a centre on an edge shared by two triangles belongs to
//! exactly one of them. Colours and depth are interpolated affinely in
//! screen space. The depth test is a strict `<` on camera-space `z` over
//! triangles in index order, so equal depths keep the lower index.

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::{resize_bilinear, Image};
use crate::math::{self, Vec3};
use crate::morphable::{FaceCoefficients, MorphableModel};

/// Default raster size for SECC images.
pub const SECC_SIZE: usize = 64;

/// Rasterized vertex colours with coverage and depth.
#[derive(Clone, Debug, PartialEq)]
pub struct SeccImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W × 3`.
    pub rgb: Vec<f64>,
    pub mask: Vec<bool>,
    /// Camera-space depth; `+∞` where uncovered.
    pub depth: Vec<f64>,
    /// Winning triangle per pixel.
    pub triangle: Vec<Option<u32>>,
}

impl SeccImage {
    fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        SeccImage {
            width,
            height,
            rgb: vec![0.0; 3 * n],
            mask: vec![false; n],
            depth: vec![f64::INFINITY; n],
            triangle: vec![None; n],
        }
    }

    pub fn to_image(&self) -> Image {
        Image::from_hwc(self.width, self.height, 3, self.rgb.clone()).expect("sizes agree by construction")
    }

    pub fn mask_image(&self) -> Image {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Image::from_hwc(self.width, self.height, 1, data).expect("sizes agree by construction")
    }
}

/// A triangle in pixel coordinates, wound so that its doubled area is
/// positive.
#[derive(Clone, Copy, Debug)]
pub struct ScreenTriangle {
    pub p: [[f64; 2]; 3],
    pub z: [f64; 3],
    area2: f64,
    order: [usize; 3],
}

/// `(b - a) × (p - a)`; positive on the interior side of a positively wound
/// edge.
fn edge(a: &[f64; 2], b: &[f64; 2], p: &[f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// With `y` pointing down and interior on the positive side, top edges run
/// in `+x` and left edges run in `-y`.
fn is_top_left(a: &[f64; 2], b: &[f64; 2]) -> bool {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

impl ScreenTriangle {
    /// Projects a world triangle; `None` if any vertex is not in front of
    /// the camera or the projection has zero area.
    pub fn project(camera: &Camera, v: [&Vec3; 3]) -> Option<Self> {
        let mut p = [[0.0; 2]; 3];
        let mut z = [0.0; 3];
        for k in 0..3 {
            let (u, w, d) = camera.project(v[k])?;
            p[k] = [u, w];
            z[k] = d;
        }
        Self::new(p, z)
    }

    pub fn new(p: [[f64; 2]; 3], z: [f64; 3]) -> Option<Self> {
        let a = edge(&p[0], &p[1], &p[2]);
        if a == 0.0 || !a.is_finite() {
            return None;
        }
        let order = if a > 0.0 { [0, 1, 2] } else { [0, 2, 1] };
        Some(ScreenTriangle {
            p: order.map(|i| p[i]),
            z: order.map(|i| z[i]),
            area2: a.abs(),
            order,
        })
    }

    /// Barycentric weights in the caller's vertex order and the interpolated
    /// depth at the centre of pixel `(x, y)`, or `None` if not covered.
    pub fn fragment(&self, x: usize, y: usize) -> Option<([f64; 3], f64)> {
        let c = [x as f64 + 0.5, y as f64 + 0.5];
        let p = &self.p;
        let e = [edge(&p[1], &p[2], &c), edge(&p[2], &p[0], &c), edge(&p[0], &p[1], &c)];
        let owners = [(1, 2), (2, 0), (0, 1)];
        for (ek, (i, j)) in e.iter().zip(owners) {
            if *ek < 0.0 || (*ek == 0.0 && !is_top_left(&p[i], &p[j])) {
                return None;
            }
        }
        let l = e.map(|v| v / self.area2);
        let depth = l[0] * self.z[0] + l[1] * self.z[1] + l[2] * self.z[2];
        let mut bary = [0.0; 3];
        for k in 0..3 {
            bary[self.order[k]] = l[k];
        }
        Some((bary, depth))
    }

    /// Inclusive pixel bounds that can contain covered centres, clipped to
    /// the raster.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for q in &self.p {
            x0 = x0.min(q[0]);
            x1 = x1.max(q[0]);
            y0 = y0.min(q[1]);
            y1 = y1.max(q[1]);
        }
        let lo = |v: f64| (v - 0.5).ceil().max(0.0);
        let hi = |v: f64, n: usize| (v - 0.5).floor().min(n as f64 - 1.0);
        let (x0, x1, y0, y1) = (lo(x0), hi(x1, width), lo(y0), hi(y1, height));
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }
}

/// Blends vertex colours with barycentric weights.
pub fn shade(colors: &[Vec3], tri: &[u32; 3], bary: &[f64; 3]) -> Vec3 {
    let mut c = [0.0; 3];
    for k in 0..3 {
        c = math::add(&c, &math::scale(&colors[tri[k] as usize], bary[k]));
    }
    c
}

/// Rasterizes a vertex-coloured mesh.
pub fn rasterize(vertices: &[Vec3], triangles: &[[u32; 3]], colors: &[Vec3], camera: &Camera) -> Result<SeccImage> {
    camera.validate()?;
    if colors.len() != vertices.len() {
        return Err(Error::shape("rasterize", format!("{} colours for {} vertices", colors.len(), vertices.len())));
    }
    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= vertices.len())) {
        return Err(Error::Geometry(format!("triangle {t:?} indexes past {} vertices", vertices.len())));
    }
    let (w, h) = (camera.width, camera.height);
    let mut out = SeccImage::empty(w, h);
    for (ti, tri) in triangles.iter().enumerate() {
        let Some(st) = ScreenTriangle::project(camera, tri.map(|i| &vertices[i as usize])) else {
            continue;
        };
        let Some((x0, x1, y0, y1)) = st.pixel_bounds(w, h) else {
            continue;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let Some((bary, depth)) = st.fragment(x, y) else {
                    continue;
                };
                let i = y * w + x;
                if depth < out.depth[i] {
                    out.depth[i] = depth;
                    out.mask[i] = true;
                    out.triangle[i] = Some(ti as u32);
                    out.rgb[3 * i..3 * i + 3].copy_from_slice(&shade(colors, tri, &bary));
                }
            }
        }
    }
    Ok(out)
}

/// Renders the model's NCC colours under `coeffs`.
pub fn render_secc(model: &MorphableModel, coeffs: &FaceCoefficients, camera: &Camera) -> Result<SeccImage> {
    coeffs.validate()?;
    let verts = model.compute_vertices(coeffs)?;
    let img = rasterize(&verts, &model.triangles, &model.ncc, camera)?;
    if !img.mask.iter().any(|&m| m) {
        return Err(Error::Geometry("mesh does not cover any pixel".into()));
    }
    Ok(img)
}

/// Driving and canonical SECC images. Both use the identity face pose; the
/// canonical one has zero expression.
pub fn make_secc_pair(
    model: &MorphableModel,
    z_shp_src: &[f64],
    z_exp_dri: &[f64],
    camera_frontal: &Camera,
) -> Result<(SeccImage, SeccImage)> {
    let dri = FaceCoefficients {
        z_shp: z_shp_src.to_vec(),
        z_exp: z_exp_dri.to_vec(),
        rotation: math::IDENTITY,
        translation: [0.0; 3],
    };
    let can = crate::morphable::neutralize(&dri);
    Ok((render_secc(model, &dri, camera_frontal)?, render_secc(model, &can, camera_frontal)?))
}

/// The pair as a 6-channel `[6, H, W]` tensor (driving first), resized
/// bilinearly to `width × height`.
pub fn secc_pair_tensor(pair: &(SeccImage, SeccImage), width: usize, height: usize) -> Result<crate::Tensor> {
    let a = resize_bilinear(&pair.0.to_image(), width, height).to_chw();
    let b = resize_bilinear(&pair.1.to_image(), width, height).to_chw();
    let mut data = a;
    data.extend(b);
    crate::Tensor::new(vec![6, height, width], data)
}
