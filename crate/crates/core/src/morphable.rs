//! Linear morphable face model and a procedurally generated toy head.
//!
//! World frame follows the camera convention: `+y` points down and the face
//! looks towards `-z`, so a camera with identity rotation placed on the
//! `-z` axis sees the face upright.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

pub const TOY_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    pub template: Vec<Vec3>,
    /// `K_s` displacement fields of `V` vectors each.
    pub shape_basis: Vec<Vec<Vec3>>,
    pub expr_basis: Vec<Vec<Vec3>>,
    pub triangles: Vec<[u32; 3]>,
    pub ncc: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceCoefficients {
    pub z_shp: Vec<f64>,
    pub z_exp: Vec<f64>,
    #[serde(rename = "R", default = "identity_rows", with = "rows")]
    pub rotation: Mat3,
    #[serde(rename = "t", default)]
    pub translation: Vec3,
}

fn identity_rows() -> Mat3 {
    math::IDENTITY
}

mod rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::math::Mat3;

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        m.iter().flatten().copied().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 9 {
            return Err(serde::de::Error::custom(format!("R needs 9 values, got {}", v.len())));
        }
        Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }
}

impl FaceCoefficients {
    /// Zero coefficients, identity pose.
    pub fn zeros(model: &MorphableModel) -> Self {
        FaceCoefficients {
            z_shp: vec![0.0; model.shape_rank()],
            z_exp: vec![0.0; model.expr_rank()],
            rotation: math::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !math::is_rotation(&self.rotation, crate::geometry::ROTATION_TOL) {
            return Err(Error::Geometry(format!("face rotation {:?} is not in SO(3)", self.rotation)));
        }
        Ok(())
    }
}

/// Drops expression and pose, keeping the shape coefficients.
pub fn neutralize(coeffs: &FaceCoefficients) -> FaceCoefficients {
    FaceCoefficients {
        z_shp: coeffs.z_shp.clone(),
        z_exp: vec![0.0; coeffs.z_exp.len()],
        rotation: math::IDENTITY,
        translation: [0.0; 3],
    }
}

impl MorphableModel {
    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn shape_rank(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn expr_rank(&self) -> usize {
        self.expr_basis.len()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        let bases_ok = self.shape_basis.iter().chain(&self.expr_basis).all(|b| b.len() == v);
        if !bases_ok || self.ncc.len() != v {
            return Err(Error::Format("basis or colour arrays disagree with the vertex count".into()));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= v)) {
            return Err(Error::Format(format!("triangle {t:?} indexes past {v} vertices")));
        }
        Ok(())
    }

    /// `R(S̄ + A_shp·z_shp + A_exp·z_exp) + t`.
    pub fn compute_vertices(&self, coeffs: &FaceCoefficients) -> Result<Vec<Vec3>> {
        if coeffs.z_shp.len() != self.shape_rank() || coeffs.z_exp.len() != self.expr_rank() {
            return Err(Error::shape(
                "compute_vertices",
                format!(
                    "model has {} shape and {} expression axes, got {} and {}",
                    self.shape_rank(),
                    self.expr_rank(),
                    coeffs.z_shp.len(),
                    coeffs.z_exp.len()
                ),
            ));
        }
        let mut verts = self.template.clone();
        let weighted = self.shape_basis.iter().zip(&coeffs.z_shp).chain(self.expr_basis.iter().zip(&coeffs.z_exp));
        for (basis, &z) in weighted {
            if z == 0.0 {
                continue;
            }
            for (v, d) in verts.iter_mut().zip(basis) {
                *v = math::add(v, &math::scale(d, z));
            }
        }
        Ok(verts
            .iter()
            .map(|v| math::add(&math::mat_vec(&coeffs.rotation, v), &coeffs.translation))
            .collect())
    }

    /// Vertices moved by expression axis `k`.
    pub fn expr_support(&self, k: usize) -> Vec<usize> {
        self.expr_basis[k]
            .iter()
            .enumerate()
            .filter(|(_, d)| d.iter().any(|&x| x != 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    /// The toy head with its default resolution and the fixed seed.
    pub fn toy() -> Self {
        ToyHeadSpec::default().build(TOY_SEED)
    }
}

/// Normalised coordinate code: per-axis affine map of the template into
/// `[0, 1]³`.
pub fn ncc_colors(template: &[Vec3]) -> Vec<Vec3> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in template {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    template
        .iter()
        .map(|v| [0, 1, 2].map(|a| (v[a] - lo[a]) / (hi[a] - lo[a])))
        .collect()
}

/// Parameters of the procedural head.
#[derive(Clone, Debug)]
pub struct ToyHeadSpec {
    pub rings: usize,
    pub segments: usize,
    pub radii: Vec3,
    pub shape_rank: usize,
    pub expr_rank: usize,
    /// Peak vertical lip displacement of the mouth-opening axis.
    pub mouth_open: f64,
}

impl Default for ToyHeadSpec {
    fn default() -> Self {
        ToyHeadSpec {
            rings: 20,
            segments: 24,
            radii: [0.72, 0.92, 0.8],
            shape_rank: 8,
            expr_rank: 8,
            mouth_open: 0.12,
        }
    }
}

struct Bump {
    center: Vec3,
    amplitude: f64,
    width: f64,
}

impl Bump {
    fn at(&self, dir: &Vec3) -> f64 {
        let d = math::sub(dir, &self.center);
        self.amplitude * (-math::dot(&d, &d) / (2.0 * self.width * self.width)).exp()
    }
}

pub(crate) fn mouth_center() -> Vec3 {
    math::normalize(&[0.0, 0.42, -1.0])
}

/// Chord-length radius of the mouth-opening support around [`mouth_center`].
const MOUTH_RADIUS: f64 = 0.3;

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = math::norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return math::scale(&v, 1.0 / n);
        }
    }
}

fn remove_mean(field: &mut [Vec3], members: &[usize]) {
    let mut mean = [0.0; 3];
    for &i in members {
        mean = math::add(&mean, &field[i]);
    }
    mean = math::scale(&mean, 1.0 / members.len() as f64);
    for &i in members {
        field[i] = math::sub(&field[i], &mean);
    }
}

/// Sum of a few Gaussian bumps on the sphere of directions, each carrying a
/// random 3-D displacement.
fn bump_field(dirs: &[Vec3], count: usize, amplitude: f64, width: f64, front_only: bool, rng: &mut impl Rng) -> Vec<Vec3> {
    let mut field = vec![[0.0; 3]; dirs.len()];
    for _ in 0..count {
        let mut center = random_unit(rng);
        if front_only {
            center[2] = -center[2].abs().max(0.6);
            center = math::normalize(&center);
        }
        let disp = math::scale(&random_unit(rng), amplitude);
        let bump = Bump {
            center,
            amplitude: 1.0,
            width,
        };
        for (f, d) in field.iter_mut().zip(dirs) {
            *f = math::add(f, &math::scale(&disp, bump.at(d)));
        }
    }
    let all: Vec<usize> = (0..dirs.len()).collect();
    remove_mean(&mut field, &all);
    field
}

impl ToyHeadSpec {
    /// Unit directions of the latitude/longitude sphere, top pole first.
    fn directions(&self) -> Vec<Vec3> {
        let mut dirs = vec![[0.0, -1.0, 0.0]];
        for i in 1..=self.rings {
            let theta = std::f64::consts::PI * i as f64 / (self.rings + 1) as f64;
            for j in 0..self.segments {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / self.segments as f64;
                dirs.push([theta.sin() * phi.sin(), -theta.cos(), -theta.sin() * phi.cos()]);
            }
        }
        dirs.push([0.0, 1.0, 0.0]);
        dirs
    }

    fn triangles(&self) -> Vec<[u32; 3]> {
        let s = self.segments as u32;
        let ring = |i: u32, j: u32| 1 + i * s + (j % s);
        let bottom = 1 + self.rings as u32 * s;
        let mut tris = Vec::new();
        for j in 0..s {
            tris.push([0, ring(0, j + 1), ring(0, j)]);
        }
        for i in 0..self.rings as u32 - 1 {
            for j in 0..s {
                tris.push([ring(i, j), ring(i, j + 1), ring(i + 1, j)]);
                tris.push([ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j)]);
            }
        }
        let last = self.rings as u32 - 1;
        for j in 0..s {
            tris.push([bottom, ring(last, j), ring(last, j + 1)]);
        }
        tris
    }

    pub fn build(&self, seed: u64) -> MorphableModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs = self.directions();
        let features = [
            // nose
            Bump { center: math::normalize(&[0.0, 0.05, -1.0]), amplitude: 0.22, width: 0.12 },
            // eye sockets
            Bump { center: math::normalize(&[0.35, -0.2, -1.0]), amplitude: -0.06, width: 0.1 },
            Bump { center: math::normalize(&[-0.35, -0.2, -1.0]), amplitude: -0.06, width: 0.1 },
            // lips and chin
            Bump { center: mouth_center(), amplitude: 0.05, width: 0.12 },
            Bump { center: math::normalize(&[0.0, 0.7, -1.0]), amplitude: 0.05, width: 0.15 },
        ];
        let template: Vec<Vec3> = dirs
            .iter()
            .map(|d| {
                let r = 1.0 + features.iter().map(|b| b.at(d)).sum::<f64>();
                [d[0] * self.radii[0] * r, d[1] * self.radii[1] * r, d[2] * self.radii[2] * r]
            })
            .collect();

        let shape_basis = (0..self.shape_rank).map(|_| bump_field(&dirs, 3, 0.05, 0.5, false, &mut rng)).collect();

        let mut expr_basis = Vec::with_capacity(self.expr_rank);
        if self.expr_rank > 0 {
            expr_basis.push(self.mouth_open_field(&dirs));
        }
        for _ in 1..self.expr_rank {
            expr_basis.push(bump_field(&dirs, 2, 0.04, 0.25, true, &mut rng));
        }

        let ncc = ncc_colors(&template);
        MorphableModel {
            template,
            shape_basis,
            expr_basis,
            triangles: self.triangles(),
            ncc,
        }
    }

    /// Lips part vertically inside a compact neighbourhood of the mouth. The
    /// mean is removed over the support only, so vertices outside it never
    /// move.
    fn mouth_open_field(&self, dirs: &[Vec3]) -> Vec<Vec3> {
        let c = mouth_center();
        let mut field = vec![[0.0; 3]; dirs.len()];
        let mut support = Vec::new();
        for (i, d) in dirs.iter().enumerate() {
            let diff = math::sub(d, &c);
            let q = math::dot(&diff, &diff) / (MOUTH_RADIUS * MOUTH_RADIUS);
            if q >= 1.0 {
                continue;
            }
            let w = (1.0 - q) * (1.0 - q);
            let side = if d[1] > c[1] { 1.0 } else { -1.0 };
            field[i] = [0.0, side * w * self.mouth_open, 0.0];
            support.push(i);
        }
        remove_mean(&mut field, &support);
        field
    }
}

fn b64_f64(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    B64.encode(bytes)
}

fn unb64_f64(s: &str, what: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| Error::Format(format!("{what}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("{what}: byte length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// On-disk form: counts plus base64 little-endian arrays.
#[derive(Serialize, Deserialize)]
struct ModelJson {
    vertices: usize,
    shape_rank: usize,
    expr_rank: usize,
    template: String,
    shape_basis: String,
    expr_basis: String,
    triangles: String,
    ncc: String,
}

fn to_vec3s(flat: Vec<f64>) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

impl MorphableModel {
    pub fn to_json(&self) -> Result<String> {
        let flat = |vs: &[Vec3]| b64_f64(vs.iter().flatten().copied());
        let basis = |bs: &[Vec<Vec3>]| b64_f64(bs.iter().flatten().flatten().copied());
        let tris: Vec<u8> = self.triangles.iter().flatten().flat_map(|i| i.to_le_bytes()).collect();
        let j = ModelJson {
            vertices: self.num_vertices(),
            shape_rank: self.shape_rank(),
            expr_rank: self.expr_rank(),
            template: flat(&self.template),
            shape_basis: basis(&self.shape_basis),
            expr_basis: basis(&self.expr_basis),
            triangles: B64.encode(tris),
            ncc: flat(&self.ncc),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: ModelJson = serde_json::from_str(s)?;
        let v = j.vertices;
        let expect = |data: Vec<f64>, n: usize, what: &str| -> Result<Vec<f64>> {
            if data.len() != n {
                return Err(Error::Format(format!("{what}: expected {n} values, found {}", data.len())));
            }
            Ok(data)
        };
        let template = to_vec3s(expect(unb64_f64(&j.template, "template")?, 3 * v, "template")?);
        let ncc = to_vec3s(expect(unb64_f64(&j.ncc, "ncc")?, 3 * v, "ncc")?);
        let split = |data: Vec<f64>| to_vec3s(data).chunks(v.max(1)).map(<[Vec3]>::to_vec).collect::<Vec<_>>();
        let shape_basis = split(expect(unb64_f64(&j.shape_basis, "shape_basis")?, 3 * v * j.shape_rank, "shape_basis")?);
        let expr_basis = split(expect(unb64_f64(&j.expr_basis, "expr_basis")?, 3 * v * j.expr_rank, "expr_basis")?);
        let tri_bytes = B64.decode(&j.triangles).map_err(|e| Error::Format(format!("triangles: {e}")))?;
        if tri_bytes.len() % 12 != 0 {
            return Err(Error::Format("triangles: byte length is not a multiple of 12".into()));
        }
        let idx: Vec<u32> = tri_bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let triangles = idx.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let m = MorphableModel {
            template,
            shape_basis,
            expr_basis,
            triangles,
            ncc,
        };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_head_is_well_formed() {
        let m = MorphableModel::toy();
        m.validate().unwrap();
        assert_eq!(m.num_vertices(), 20 * 24 + 2);
        assert_eq!(m.triangles.len(), 2 * 24 * 20);
        assert_eq!((m.shape_rank(), m.expr_rank()), (8, 8));
        assert!(m.template.iter().flatten().all(|v| v.abs() < 1.0));
        for basis in m.shape_basis.iter().chain(&m.expr_basis) {
            for a in 0..3 {
                let mean: f64 = basis.iter().map(|d| d[a]).sum::<f64>() / basis.len() as f64;
                assert!(mean.abs() < 1e-14, "basis mean {mean}");
            }
        }
        assert!(m.ncc.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn mouth_axis_is_local() {
        let m = MorphableModel::toy();
        let support = m.expr_support(0);
        assert!(!support.is_empty() && support.len() < m.num_vertices() / 10);
        let c = mouth_center();
        for &i in &support {
            let d = math::normalize(&m.template[i]);
            assert!(d[2] < 0.0, "support vertex {i} is not on the face side");
            assert!(d[1] > c[1] - 0.4);
        }
    }

    #[test]
    fn zero_coefficients_reproduce_template() {
        let m = MorphableModel::toy();
        let v = m.compute_vertices(&FaceCoefficients::zeros(&m)).unwrap();
        assert_eq!(v, m.template);
        let mut bad = FaceCoefficients::zeros(&m);
        bad.z_exp.pop();
        assert!(m.compute_vertices(&bad).is_err());
    }

    #[test]
    fn shape_displacement_is_linear() {
        let m = MorphableModel::toy();
        let mut c = FaceCoefficients::zeros(&m);
        c.z_shp[2] = 0.7;
        let one = m.compute_vertices(&c).unwrap();
        c.z_shp[2] = 1.4;
        let two = m.compute_vertices(&c).unwrap();
        for ((a, b), t) in one.iter().zip(&two).zip(&m.template) {
            for k in 0..3 {
                assert!(((b[k] - t[k]) - 2.0 * (a[k] - t[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn neutralize_fields() {
        let c = FaceCoefficients {
            z_shp: vec![0.3; 8],
            z_exp: vec![-0.5; 8],
            rotation: math::rot_y(0.4),
            translation: [0.1, 0.2, 0.3],
        };
        let n = neutralize(&c);
        assert_eq!(n.z_shp, c.z_shp);
        assert!(n.z_exp.iter().all(|&z| z == 0.0));
        assert_eq!(n.rotation, math::IDENTITY);
        assert_eq!(n.translation, [0.0; 3]);
        assert_eq!(neutralize(&n), n);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let m = ToyHeadSpec {
            rings: 4,
            segments: 5,
            ..Default::default()
        }
        .build(7);
        let back = MorphableModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let coeffs: FaceCoefficients = serde_json::from_str(r#"{"z_shp":[1.0],"z_exp":[0.5]}"#).unwrap();
        assert_eq!(coeffs.rotation, math::IDENTITY);
    }
}
