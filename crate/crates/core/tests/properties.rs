mod common;

use proptest::prelude::*;
use tpdr_core::appearance::{sample_level, TriPlaneLevel};
use tpdr_core::autodiff::{checkpoint, ParamSet};
use tpdr_core::deformation::deformation_l1;
use tpdr_core::geometry::{generate_rays, rigid_apply, rigid_invert, stratified_sample, Camera};
use tpdr_core::image::Image;
use tpdr_core::math::{self, Vec3};
use tpdr_core::metrics::avd;
use tpdr_core::morphable::{ncc_colors, FaceCoefficients, MorphableModel};
use tpdr_core::raster::rasterize;
use tpdr_core::renderer::integrate_ray;
use tpdr_core::Tensor;

fn vec3(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
    [lo..hi, lo..hi, lo..hi]
}

fn rotation() -> impl Strategy<Value = math::Mat3> {
    (-3.2f64..3.2, -1.5f64..1.5, -3.2f64..3.2)
        .prop_map(|(a, b, c)| math::mat_mul(&math::rot_y(a), &math::mat_mul(&math::rot_x(b), &math::rot_z(c))))
}

fn toy() -> &'static MorphableModel {
    static M: std::sync::OnceLock<MorphableModel> = std::sync::OnceLock::new();
    M.get_or_init(MorphableModel::toy)
}

fn coeffs() -> impl Strategy<Value = FaceCoefficients> {
    (
        prop::collection::vec(-1.5f64..1.5, 8),
        prop::collection::vec(-1.5f64..1.5, 8),
        rotation(),
        vec3(-1.0, 1.0),
    )
        .prop_map(|(z_shp, z_exp, rotation, translation)| FaceCoefficients {
            z_shp,
            z_exp,
            rotation,
            translation,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zbuffer_equals_painter_on_triangle_soup(
        verts in prop::collection::vec(vec3(-1.0, 1.0), 3..30),
        colors in prop::collection::vec(vec3(0.0, 1.0), 30),
    ) {
        let verts: Vec<Vec3> = verts.into_iter().map(|v| [v[0], v[1], v[2] * 0.5]).collect();
        let n = verts.len() / 3 * 3;
        let tris: Vec<[u32; 3]> = (0..n as u32 / 3).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        let camera = Camera::frontal(16, 16, 3.0, 1.0);
        let z = rasterize(&verts, &tris, &colors[..verts.len()], &camera).unwrap();
        let p = common::painter(&verts, &tris, &colors[..verts.len()], &camera);
        prop_assert_eq!(z.triangle, p.triangle);
        prop_assert_eq!(z.rgb, p.rgb);
    }

    #[test]
    fn ncc_is_an_invertible_affine_code(points in prop::collection::hash_set(prop::collection::vec(-50i32..50, 3), 2..40)) {
        let template: Vec<Vec3> = points.iter().map(|p| [p[0] as f64 * 0.1, p[1] as f64 * 0.1, p[2] as f64 * 0.1]).collect();
        prop_assume!((0..3).all(|a| template.iter().any(|v| v[a] != template[0][a])));
        let c = ncc_colors(&template);
        for v in &c {
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                prop_assert_ne!(c[i], c[j]);
            }
        }
        let lo: Vec<f64> = (0..3).map(|a| template.iter().map(|v| v[a]).fold(f64::INFINITY, f64::min)).collect();
        let hi: Vec<f64> = (0..3).map(|a| template.iter().map(|v| v[a]).fold(f64::NEG_INFINITY, f64::max)).collect();
        for (v, col) in template.iter().zip(&c) {
            for a in 0..3 {
                prop_assert!((lo[a] + col[a] * (hi[a] - lo[a]) - v[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn avd_is_a_symmetric_shape_distance(a in coeffs(), b in coeffs(), c in coeffs()) {
        let m = toy();
        prop_assert_eq!(avd(m, &a, &a).unwrap(), 0.0);
        prop_assert!((avd(m, &a, &b).unwrap() - avd(m, &b, &a).unwrap()).abs() < 1e-12);
        let posed = FaceCoefficients { z_shp: a.z_shp.clone(), ..c.clone() };
        prop_assert!(avd(m, &a, &posed).unwrap() < 1e-12);
        let ab = avd(m, &a, &b).unwrap();
        prop_assert!(ab <= avd(m, &a, &c).unwrap() + avd(m, &c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn deformation_l1_is_absolutely_homogeneous(delta in prop::collection::vec(-2.0f64..2.0, 0..60), alpha in -5.0f64..5.0) {
        let scaled: Vec<f64> = delta.iter().map(|d| alpha * d).collect();
        let want = alpha.abs() * deformation_l1(&delta);
        prop_assert!((deformation_l1(&scaled) - want).abs() <= 1e-12 * (1.0 + want));
        prop_assert!(deformation_l1(&delta) >= 0.0);
    }

    #[test]
    fn constant_medium_quadrature_converges(sigma in 0.1f64..6.0, near in 0.5f64..2.0, len in 0.2f64..2.0, n in 2usize..64) {
        let camera = Camera::frontal(1, 1, 3.0, 1.0);
        let rays = generate_rays(&camera, near, near + len).unwrap();
        let exact = 1.0 - (-sigma * len).exp();
        let err = |samples: usize| {
            let pts = stratified_sample(&rays, samples, None).unwrap();
            let (c, a) = integrate_ray(&vec![[1.0, 0.5, 0.0]; samples], &vec![sigma; samples], &pts.depths, near + len).unwrap();
            assert!((c[0] - a).abs() < 1e-12 && (c[1] - 0.5 * a).abs() < 1e-12);
            (a - exact).abs()
        };
        let (e1, e2) = (err(n), err(2 * n));
        prop_assert!(e2 <= e1 + 1e-15);
        prop_assert!(e1 <= sigma * len / (2.0 * n as f64) + 1e-12);
    }

    #[test]
    fn compositing_is_energy_bounded(
        samples in prop::collection::vec((vec3(0.0, 1.0), 0.0f64..50.0, 0.01f64..0.5), 1..40),
    ) {
        let mut t = 0.5;
        let (mut rgbs, mut sigmas, mut depths) = (vec![], vec![], vec![]);
        for (c, s, d) in &samples {
            rgbs.push(*c);
            sigmas.push(*s);
            depths.push(t);
            t += d;
        }
        let (c, a) = integrate_ray(&rgbs, &sigmas, &depths, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        for ch in c {
            prop_assert!(ch >= 0.0 && ch <= a + 1e-12);
        }
    }

    #[test]
    fn splitting_a_segment_changes_nothing(
        samples in prop::collection::vec((vec3(0.0, 1.0), 0.0f64..5.0, 0.05f64..0.5), 1..20),
        which in 0usize..20, frac in 0.05f64..0.95,
    ) {
        let which = which % samples.len();
        let mut t = 1.0;
        let (mut rgbs, mut sigmas, mut depths) = (vec![], vec![], vec![]);
        let (mut rgbs2, mut sigmas2, mut depths2) = (vec![], vec![], vec![]);
        for (i, (c, s, d)) in samples.iter().enumerate() {
            rgbs.push(*c);
            sigmas.push(*s);
            depths.push(t);
            rgbs2.push(*c);
            sigmas2.push(*s);
            depths2.push(t);
            if i == which {
                rgbs2.push(*c);
                sigmas2.push(*s);
                depths2.push(t + frac * d);
            }
            t += d;
        }
        let (c1, a1) = integrate_ray(&rgbs, &sigmas, &depths, t).unwrap();
        let (c2, a2) = integrate_ray(&rgbs2, &sigmas2, &depths2, t).unwrap();
        prop_assert!((a1 - a2).abs() < 1e-12);
        for k in 0..3 {
            prop_assert!((c1[k] - c2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn triplane_lookup_matches_dense_interpolation(
        res in 2usize..7, channels in 1usize..4, extent in 0.5f64..2.0, seed in any::<u64>(),
        p in vec3(-2.5, 2.5),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut plane = || Tensor::new(vec![channels, res, res], (0..channels * res * res).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let level = TriPlaneLevel::new([plane(), plane(), plane()], extent).unwrap();
        let got = sample_level(&level, &p).unwrap();
        let want = common::dense_level(&level, &p);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn rigid_inverse_roundtrips(r in rotation(), t in vec3(-3.0, 3.0), pts in prop::collection::vec(vec3(-2.0, 2.0), 1..10)) {
        let (ri, ti) = rigid_invert(&r, &t).unwrap();
        let back = rigid_apply(&ri, &ti, &rigid_apply(&r, &t, &pts).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&pts) {
            prop_assert!(math::norm(&math::sub(a, b)) < 1e-12);
        }
    }

    #[test]
    fn pixel_rays_project_to_pixel_centres(yaw in -1.0f64..1.0, pitch in -0.5f64..0.5, t in 0.5f64..3.0) {
        let camera = Camera::frontal(7, 5, 2.0, 0.8).orbit(yaw, pitch, &[0.0; 3]);
        let rays = generate_rays(&camera, 0.1, 5.0).unwrap();
        for (i, (o, d)) in rays.origins.iter().zip(&rays.directions).enumerate() {
            let (u, v, _) = camera.project(&math::add(o, &math::scale(d, t))).unwrap();
            prop_assert!((u - ((i % 7) as f64 + 0.5)).abs() < 1e-9);
            prop_assert!((v - ((i / 7) as f64 + 0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoints_roundtrip_bitwise(entries in prop::collection::vec((prop::collection::vec(1usize..4, 0..3), any::<u64>()), 0..6)) {
        let mut params = ParamSet::new();
        for (i, (shape, seed)) in entries.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|k| f64::from_bits(seed.wrapping_add(k as u64) >> 2)).collect();
            params.insert(format!("p{i}"), Tensor::new(shape.clone(), data).unwrap());
        }
        let back = checkpoint::decode(&checkpoint::encode(&params)).unwrap();
        prop_assert_eq!(back.len(), params.len());
        for (name, t) in params.iter() {
            let b = back.get(name).unwrap();
            prop_assert_eq!(b.shape(), t.shape());
            prop_assert!(b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn pnm_roundtrip_after_quantization(w in 1usize..9, h in 1usize..9, gray in any::<bool>(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = if gray { 1 } else { 3 };
        let img = Image::from_hwc(w, h, c, (0..w * h * c).map(|_| rng.random_range(-0.2..1.2)).collect()).unwrap().quantized();
        let back = Image::decode_pnm(&img.encode_pnm().unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }
}
