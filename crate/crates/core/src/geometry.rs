//! Pinhole cameras, ray generation, stratified depth sampling, sinusoidal
//! position encoding and rigid transforms.
//!
//! Conventions, used everywhere in the crate:
//! * `R, t` map world to camera: `x_cam = R·x_world + t`; the camera center
//!   is `-Rᵀt`.
//! * Camera axes follow the image: `+x` right, `+y` down, `+z` forward.
//! * The ray for pixel `(h, w)` passes through the pixel center
//!   `(w + 0.5, h + 0.5)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

/// Tolerance for the orthonormality check on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    #[serde(rename = "R")]
    r: Vec<f64>,
    t: Vec<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        if j.r.len() != 9 || j.t.len() != 3 {
            return Err(Error::Format(format!(
                "camera needs 9 rotation and 3 translation values, got {} and {}",
                j.r.len(),
                j.t.len()
            )));
        }
        let cam = Camera {
            rotation: [[j.r[0], j.r[1], j.r[2]], [j.r[3], j.r[4], j.r[5]], [j.r[6], j.r[7], j.r[8]]],
            translation: [j.t[0], j.t[1], j.t[2]],
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            width: j.width,
            height: j.height,
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        CameraJson {
            r: c.rotation.iter().flatten().copied().collect(),
            t: c.translation.to_vec(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl Camera {
    /// Camera on the `-z` axis at `distance` from the origin, looking at it,
    /// with a symmetric field of view set by `focal_scale · width`.
    pub fn frontal(width: usize, height: usize, distance: f64, focal_scale: f64) -> Self {
        Camera {
            rotation: math::IDENTITY,
            translation: [0.0, 0.0, distance],
            fx: focal_scale * width as f64,
            fy: focal_scale * width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !math::is_rotation(&self.rotation, ROTATION_TOL) {
            return Err(Error::Geometry(format!("camera rotation {:?} is not in SO(3)", self.rotation)));
        }
        let intr_ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if !intr_ok || self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry(format!(
                "degenerate camera: fx={} fy={} cx={} cy={} size={}x{}",
                self.fx, self.fy, self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        math::scale(&math::mat_vec(&math::transpose(&self.rotation), &self.translation), -1.0)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        math::add(&math::mat_vec(&self.rotation, p), &self.translation)
    }

    /// Continuous pixel coordinates `(u, v)` and camera depth `z` of a world
    /// point; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 0.0 {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// Rotates the camera rig about `pivot` by `yaw` (about world `y`) and
    /// then `pitch` (about world `x`), keeping intrinsics.
    pub fn orbit(&self, yaw: f64, pitch: f64, pivot: &Vec3) -> Camera {
        let q = math::mat_mul(&math::rot_x(pitch), &math::rot_y(yaw));
        let center = math::add(pivot, &math::mat_vec(&q, &math::sub(&self.center(), pivot)));
        let rotation = math::mat_mul(&self.rotation, &math::transpose(&q));
        let translation = math::scale(&math::mat_vec(&rotation, &center), -1.0);
        Camera {
            rotation,
            translation,
            ..self.clone()
        }
    }

    /// Same pose and field of view at a different raster size.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

/// One ray per pixel, row-major over `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub width: usize,
    pub height: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub t_near: f64,
    pub t_far: f64,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

pub fn generate_rays(camera: &Camera, t_near: f64, t_far: f64) -> Result<RayBatch> {
    camera.validate()?;
    if !(t_near > 0.0 && t_near < t_far) {
        return Err(Error::InvalidArgument(format!(
            "depth bounds must satisfy 0 < t_near < t_far, got [{t_near}, {t_far}]"
        )));
    }
    let rt = math::transpose(&camera.rotation);
    let origin = camera.center();
    let n = camera.width * camera.height;
    let mut directions = Vec::with_capacity(n);
    for h in 0..camera.height {
        for w in 0..camera.width {
            let d = [
                (w as f64 + 0.5 - camera.cx) / camera.fx,
                (h as f64 + 0.5 - camera.cy) / camera.fy,
                1.0,
            ];
            directions.push(math::normalize(&math::mat_vec(&rt, &d)));
        }
    }
    Ok(RayBatch {
        width: camera.width,
        height: camera.height,
        origins: vec![origin; n],
        directions,
        t_near,
        t_far,
    })
}

/// `N` samples per ray, stored ray-major: sample `i` of ray `r` is at
/// `r * samples + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointBatch {
    pub width: usize,
    pub height: usize,
    pub samples: usize,
    pub positions: Vec<Vec3>,
    pub depths: Vec<f64>,
    pub t_far: f64,
}

impl PointBatch {
    pub fn rays(&self) -> usize {
        self.width * self.height
    }

    /// Positions flattened to `[H·W·N·3]`, which is also the channels-last
    /// `H × W × 3N` layout `(x₁, y₁, z₁, x₂, …)` per pixel.
    pub fn flat_positions(&self) -> Vec<f64> {
        self.positions.iter().flatten().copied().collect()
    }

    /// Segment lengths for quadrature: `t_{i+1} - t_i`, and `t_far - t_N`
    /// for the last sample of each ray.
    pub fn deltas(&self) -> Vec<f64> {
        let n = self.samples;
        let mut out = Vec::with_capacity(self.depths.len());
        for ray in self.depths.chunks(n) {
            for i in 0..n {
                let next = if i + 1 < n { ray[i + 1] } else { self.t_far };
                out.push(next - ray[i]);
            }
        }
        out
    }

    /// Keeps only the listed rays, in the given order.
    pub fn select_rays(&self, rays: &[usize]) -> PointBatch {
        let n = self.samples;
        let mut positions = Vec::with_capacity(rays.len() * n);
        let mut depths = Vec::with_capacity(rays.len() * n);
        for &r in rays {
            positions.extend_from_slice(&self.positions[r * n..(r + 1) * n]);
            depths.extend_from_slice(&self.depths[r * n..(r + 1) * n]);
        }
        PointBatch {
            width: rays.len(),
            height: 1,
            samples: n,
            positions,
            depths,
            t_far: self.t_far,
        }
    }
}

/// One depth per equal-width bin of `[t_near, t_far]`. With `jitter = None`
/// each depth is its bin midpoint; otherwise it is uniform within the bin,
/// drawn from a generator seeded with the given value.
pub fn stratified_sample(rays: &RayBatch, samples: usize, jitter: Option<u64>) -> Result<PointBatch> {
    if samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples per ray, got {samples}")));
    }
    let mut rng = jitter.map(ChaCha8Rng::seed_from_u64);
    let span = rays.t_far - rays.t_near;
    let bin = span / samples as f64;
    let total = rays.len() * samples;
    let mut positions = Vec::with_capacity(total);
    let mut depths = Vec::with_capacity(total);
    for (o, d) in rays.origins.iter().zip(&rays.directions) {
        for i in 0..samples {
            let u = match rng.as_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            let t = rays.t_near + (i as f64 + u) * bin;
            depths.push(t);
            positions.push(math::add(o, &math::scale(d, t)));
        }
    }
    Ok(PointBatch {
        width: rays.width,
        height: rays.height,
        samples,
        positions,
        depths,
        t_far: rays.t_far,
    })
}

/// `γ(q)`: for every component, `sin(2^l π q), cos(2^l π q)` for
/// `l = 0..levels`, interleaved in that order.
pub fn positional_encoding(q: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * levels * q.len());
    encode_into(q, levels, &mut out);
    out
}

pub(crate) fn encode_into(q: &[f64], levels: usize, out: &mut Vec<f64>) {
    for &x in q {
        let mut freq = PI;
        for _ in 0..levels {
            let (s, c) = (freq * x).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
}

fn check_rotation(r: &Mat3) -> Result<()> {
    if math::is_rotation(r, ROTATION_TOL) {
        Ok(())
    } else {
        Err(Error::Geometry(format!("{r:?} is not a rotation")))
    }
}

/// `R·p + t` for every point.
pub fn rigid_apply(r: &Mat3, t: &Vec3, points: &[Vec3]) -> Result<Vec<Vec3>> {
    check_rotation(r)?;
    Ok(points.iter().map(|p| math::add(&math::mat_vec(r, p), t)).collect())
}

/// Inverse transform `(Rᵀ, -Rᵀt)`.
pub fn rigid_invert(r: &Mat3, t: &Vec3) -> Result<(Mat3, Vec3)> {
    check_rotation(r)?;
    let rt = math::transpose(r);
    let ti = math::scale(&math::mat_vec(&rt, t), -1.0);
    Ok((rt, ti))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::frontal(8, 6, 2.0, 1.2)
    }

    #[test]
    fn principal_pixel_looks_forward() {
        let c = Camera {
            cx: 3.5,
            cy: 2.5,
            ..cam()
        };
        let rays = generate_rays(&c, 0.5, 3.5).unwrap();
        let d = rays.directions[2 * 8 + 3];
        assert!((d[0]).abs() < 1e-15 && (d[1]).abs() < 1e-15 && (d[2] - 1.0).abs() < 1e-15);
        assert_eq!(rays.origins[0], [0.0, 0.0, -2.0]);
    }

    #[test]
    fn yaw_quarter_turn_principal_axis() {
        let base = Camera {
            cx: 3.5,
            cy: 2.5,
            ..cam()
        };
        let turned = base.orbit(std::f64::consts::FRAC_PI_2, 0.0, &[0.0; 3]);
        let rays = generate_rays(&turned, 0.5, 3.5).unwrap();
        let d = rays.directions[2 * 8 + 3];
        // The rig moved from -z to -x, so it now looks along +x.
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12, "{d:?}");
    }

    #[test]
    fn midpoint_depths() {
        let rays = generate_rays(&cam(), 1.0, 2.0).unwrap();
        let pts = stratified_sample(&rays, 4, None).unwrap();
        assert_eq!(&pts.depths[..4], &[1.125, 1.375, 1.625, 1.875]);
        assert_eq!(&pts.deltas()[..4], &[0.25, 0.25, 0.25, 0.125]);
    }

    #[test]
    fn jittered_depths_stay_in_bins() {
        let rays = generate_rays(&cam(), 1.0, 3.0).unwrap();
        let a = stratified_sample(&rays, 5, Some(9)).unwrap();
        let b = stratified_sample(&rays, 5, Some(9)).unwrap();
        assert_eq!(a, b);
        for ray in a.depths.chunks(5) {
            for (i, &t) in ray.iter().enumerate() {
                let lo = 1.0 + 0.4 * i as f64;
                assert!(t >= lo && t < lo + 0.4);
            }
        }
        assert!(stratified_sample(&rays, 1, None).is_err());
    }

    #[test]
    fn encoding_values() {
        assert_eq!(positional_encoding(&[0.0], 2), vec![0.0, 1.0, 0.0, 1.0]);
        let e = positional_encoding(&[1.0], 1);
        assert!(e[0].abs() < 1e-15 && (e[1] + 1.0).abs() < 1e-15);
        let a = positional_encoding(&[0.37], 1);
        let b = positional_encoding(&[2.37], 1);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        assert_eq!(positional_encoding(&[0.1, 0.2, 0.3], 4).len(), 24);
    }

    #[test]
    fn rigid_basics() {
        let pts = rigid_apply(&math::IDENTITY, &[1.0, 2.0, 3.0], &[[0.0; 3]]).unwrap();
        assert_eq!(pts[0], [1.0, 2.0, 3.0]);
        let bad = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(rigid_apply(&bad, &[0.0; 3], &[[0.0; 3]]).is_err());
        assert!(rigid_invert(&bad, &[0.0; 3]).is_err());
    }

    #[test]
    fn camera_json_roundtrip_and_validation() {
        let c = cam().orbit(0.3, -0.1, &[0.0; 3]);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"R\""));
        let back: Camera = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let bad = s.replace("\"fx\":", "\"fx\":-");
        assert!(serde_json::from_str::<Camera>(&bad).is_err());
    }
}
