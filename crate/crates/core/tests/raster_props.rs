use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};
use proptest::prelude::*;
use splat_lod::raster::{self, RasterConfig, TILE_SIZE};
use splat_lod::scene::effective_covariance;
use splat_lod::synth::{random_scene, random_scene_camera};
use splat_lod::Gaussian;

fn cfg() -> RasterConfig {
    RasterConfig { track_max_weight: true, ..Default::default() }
}

fn items(gs: &[Gaussian]) -> Vec<(&Gaussian, f64)> {
    gs.iter().map(|g| (g, 1.0)).collect()
}

#[test]
fn tiles_only_see_their_own_splats() {
    let scene = random_scene(11, 300, 1);
    let cam = random_scene_camera(64, 48);
    let full = raster::render_gaussians(&scene.gaussians, &cam, &cfg());
    let splats = raster::project_all(&items(&scene.gaussians), &cam, &cfg());
    let (tx, ty) = (1usize, 2usize);
    let (x0, y0) = ((tx * TILE_SIZE) as f64, (ty * TILE_SIZE) as f64);
    let local: Vec<_> = splats
        .iter()
        .filter(|s| s.overlaps_rect(x0, y0, x0 + TILE_SIZE as f64, y0 + TILE_SIZE as f64))
        .cloned()
        .collect();
    assert!(local.len() < splats.len());
    let part = raster::rasterize(&local, &cam, scene.len(), &cfg());
    for y in ty * TILE_SIZE..(ty + 1) * TILE_SIZE {
        for x in tx * TILE_SIZE..(tx + 1) * TILE_SIZE {
            assert_eq!(full.pixel(x, y), part.pixel(x, y), "pixel ({x}, {y})");
        }
    }
}

#[test]
fn opaque_front_splat_hides_everything_behind() {
    let cam = random_scene_camera(32, 32);
    let back = Gaussian::isotropic(Vector3::new(0.0, 0.0, 5.0), 0.5, 0.9, [0.1, 0.9, 0.2]);
    let wall = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 5.0, 1.0, [0.7, 0.3, 0.5]);
    let cfg = RasterConfig { dilation: 0.0, ..cfg() };
    let both = raster::render_gaussians(&[back.clone(), wall.clone()], &cam, &cfg);
    let alone = raster::render_gaussians(&[wall], &cam, &cfg);
    let c = both.pixel(16, 16);
    let a = alone.pixel(16, 16);
    for k in 0..3 {
        // α is clamped at 0.99, so 1% of the back splat leaks through.
        assert!((c[k] - a[k]).abs() < 0.011, "{c:?} vs {a:?}");
    }
}

#[test]
fn tile_counts_match_exact_overlap() {
    let scene = random_scene(5, 200, 0);
    let cam = random_scene_camera(50, 40);
    let out = raster::render_gaussians(&scene.gaussians, &cam, &cfg());
    let splats = raster::project_all(&items(&scene.gaussians), &cam, &cfg());
    for ty in 0..out.tiles_y {
        for tx in 0..out.tiles_x {
            let x0 = (tx * TILE_SIZE) as f64;
            let y0 = (ty * TILE_SIZE) as f64;
            let x1 = ((tx + 1) * TILE_SIZE).min(50) as f64;
            let y1 = ((ty + 1) * TILE_SIZE).min(40) as f64;
            let n = splats.iter().filter(|s| s.overlaps_rect(x0, y0, x1, y1)).count();
            assert_eq!(out.per_tile_count[ty * out.tiles_x + tx] as usize, n, "tile ({tx}, {ty})");
        }
    }
}

fn arb_gaussian() -> impl Strategy<Value = Gaussian> {
    (
        prop::array::uniform3(-1.5f64..1.5),
        2.0f64..6.0,
        prop::array::uniform3(0.02f64..0.5),
        prop::array::uniform3(-3.2f64..3.2),
        0.05f64..1.0,
        prop::array::uniform3(0.0f64..1.0),
    )
        .prop_map(|(m, z, s, e, o, rgb)| {
            let mut g = Gaussian::isotropic(Vector3::new(m[0], m[1], z), 1.0, o, rgb);
            g.scale = Vector3::from(s);
            g.rotation = UnitQuaternion::from_euler_angles(e[0], e[1], e[2]).into_inner();
            g
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_eigenvalues_are_scales_squared_plus_filter(g in arb_gaussian(), v in 0.0f64..0.2) {
        let g = Gaussian { filter_variance: v, ..g };
        let cov = effective_covariance(&g);
        prop_assert!((cov - cov.transpose()).abs().max() < 1e-15);
        let mut got: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        let mut want: Vec<f64> = g.scale.iter().map(|s| s * s + v).collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12 * b.max(1.0), "{got:?} vs {want:?}");
        }
        let r: Matrix3<f64> = g.rotation_matrix();
        prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn pixels_are_convex_combinations(gs in prop::collection::vec(arb_gaussian(), 1..40)) {
        let cam = random_scene_camera(32, 24);
        let out = raster::render_gaussians(&gs, &cam, &cfg());
        for px in &out.image {
            for &c in px {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&c), "{px:?}");
            }
        }
        if let Some(w) = &out.per_gaussian_max_weight {
            prop_assert!(w.iter().all(|&x| (0.0..=0.99 + 1e-12).contains(&x)));
        }
    }

    #[test]
    fn appending_far_splat_never_brightens_coverage(gs in prop::collection::vec(arb_gaussian(), 1..30), extra in arb_gaussian()) {
        // A splat strictly behind every other one cannot change how many
        // earlier splats a pixel sees, only add to the count.
        let cam = random_scene_camera(32, 24);
        let far = Gaussian { mean: Vector3::new(extra.mean.x, extra.mean.y, 20.0), ..extra };
        let before = raster::render_gaussians(&gs, &cam, &cfg());
        let mut more = gs.clone();
        more.push(far);
        let after = raster::render_gaussians(&more, &cam, &cfg());
        for (a, b) in before.per_pixel_visible.iter().zip(&after.per_pixel_visible) {
            prop_assert!(b >= a && *b <= a + 1);
        }
        let (wb, wa) = (before.per_gaussian_max_weight.unwrap(), after.per_gaussian_max_weight.unwrap());
        prop_assert_eq!(&wb[..], &wa[..gs.len()]);
    }
}
