//! Procedural fixtures.
//!
//! `deep_street` builds a long corridor (walls, floor and an end wall) out of
//! three layers: a coarse opaque base, a medium detail layer, and a dense
//! layer of tiny splats. The color of every layer follows one smooth texture
//! field, so dropping detail at a distance changes little on screen while
//! making a large difference to rasterizer load.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lod::uniform_rotation;
use crate::scene::{rgb_to_sh_dc, sh_terms, Camera, Gaussian, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepStreetConfig {
    pub seed: u64,
    pub length: f64,
    pub half_width: f64,
    pub wall_height: f64,
    pub base_spacing: f64,
    pub base_sigma: f64,
    pub medium_density: f64,
    pub medium_sigma: [f64; 2],
    pub fine_density: f64,
    pub fine_sigma: [f64; 2],
    pub detail_color_noise: f64,
    pub n_cameras: usize,
    pub camera_x: [f64; 2],
    pub camera_height: f64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
}

impl Default for DeepStreetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            length: 200.0,
            half_width: 5.0,
            wall_height: 6.0,
            base_spacing: 0.8,
            base_sigma: 0.45,
            medium_density: 1.2,
            medium_sigma: [0.04, 0.06],
            fine_density: 5.0,
            fine_sigma: [0.01, 0.015],
            detail_color_noise: 0.03,
            n_cameras: 50,
            camera_x: [5.0, 70.0],
            camera_height: 1.7,
            width: 160,
            height: 120,
            focal: 120.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub scene: Scene,
    pub train_cameras: Vec<Camera>,
    pub test_cameras: Vec<Camera>,
}

/// Smooth procedural albedo.
fn texture(p: &Vector3<f64>) -> [f64; 3] {
    let a = (0.31 * p.x).sin() * (0.9 * p.z + 0.4 * p.y).cos();
    let b = (0.07 * p.x + 0.5 * p.z).sin();
    [
        (0.45 + 0.2 * a + 0.1 * b).clamp(0.05, 0.95),
        (0.40 + 0.15 * b - 0.1 * a).clamp(0.05, 0.95),
        (0.35 + 0.2 * (0.13 * p.x + p.y).cos() * 0.5 + 0.1 * a).clamp(0.05, 0.95),
    ]
}

#[derive(Clone, Copy)]
struct Surface {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    /// Unit normal pointing into the corridor.
    normal: Vector3<f64>,
}

impl Surface {
    fn area(&self) -> f64 {
        self.u.norm() * self.v.norm()
    }

    fn at(&self, a: f64, b: f64) -> Vector3<f64> {
        self.origin + a * self.u + b * self.v
    }

    /// Axis-aligned scale flattening splats along the normal.
    fn flat_scale(&self, tangential: f64, normal: f64) -> Vector3<f64> {
        Vector3::from_fn(|i, _| if self.normal[i].abs() > 0.5 { normal } else { tangential })
    }
}

fn surfaces(cfg: &DeepStreetConfig) -> Vec<Surface> {
    let (l, w, h) = (cfg.length, cfg.half_width, cfg.wall_height);
    vec![
        Surface {
            origin: Vector3::new(0.0, -w, 0.0),
            u: Vector3::new(l, 0.0, 0.0),
            v: Vector3::new(0.0, 2.0 * w, 0.0),
            normal: Vector3::z(),
        },
        Surface {
            origin: Vector3::new(0.0, -w, 0.0),
            u: Vector3::new(l, 0.0, 0.0),
            v: Vector3::new(0.0, 0.0, h),
            normal: Vector3::y(),
        },
        Surface {
            origin: Vector3::new(0.0, w, 0.0),
            u: Vector3::new(l, 0.0, 0.0),
            v: Vector3::new(0.0, 0.0, h),
            normal: -Vector3::y(),
        },
        Surface {
            origin: Vector3::new(l, -w, 0.0),
            u: Vector3::new(0.0, 2.0 * w, 0.0),
            v: Vector3::new(0.0, 0.0, h),
            normal: -Vector3::x(),
        },
    ]
}

fn splat(mean: Vector3<f64>, scale: Vector3<f64>, rotation: Quaternion<f64>, opacity: f64, rgb: [f64; 3]) -> Gaussian {
    Gaussian {
        mean,
        scale,
        rotation,
        opacity,
        sh_coeffs: rgb.iter().map(|&c| rgb_to_sh_dc(c)).collect(),
        filter_variance: 0.0,
    }
}

fn jittered(rgb: [f64; 3], noise: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    rgb.map(|c| (c + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0))
}

/// Corridor along +x with z up, plus training and test cameras walking down
/// it and looking ahead.
pub fn deep_street(cfg: &DeepStreetConfig) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gaussians = Vec::new();
    for s in surfaces(cfg) {
        let nu = (s.u.norm() / cfg.base_spacing).ceil() as usize;
        let nv = (s.v.norm() / cfg.base_spacing).ceil() as usize;
        for i in 0..nu {
            for j in 0..nv {
                let a = (i as f64 + 0.5 + rng.gen_range(-0.2..0.2)) / nu as f64;
                let b = (j as f64 + 0.5 + rng.gen_range(-0.2..0.2)) / nv as f64;
                let p = s.at(a, b);
                let sigma = cfg.base_sigma * rng.gen_range(0.9..1.1);
                gaussians.push(splat(p, s.flat_scale(sigma, 0.05), Quaternion::identity(), 0.92, texture(&p)));
            }
        }
    }
    for s in surfaces(cfg) {
        let n = (s.area() * cfg.medium_density).round() as usize;
        for _ in 0..n {
            let p = s.at(rng.gen(), rng.gen()) + 0.03 * s.normal;
            let sigma = rng.gen_range(cfg.medium_sigma[0]..cfg.medium_sigma[1]);
            let spin = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(s.normal), rng.gen_range(0.0..std::f64::consts::PI));
            let scale = s.flat_scale(sigma, 0.3 * sigma);
            let rgb = jittered(texture(&p), cfg.detail_color_noise, &mut rng);
            gaussians.push(splat(p, scale, spin.into_inner(), 0.8, rgb));
        }
    }
    for s in surfaces(cfg) {
        let n = (s.area() * cfg.fine_density).round() as usize;
        for _ in 0..n {
            let p = s.at(rng.gen(), rng.gen()) + 0.05 * s.normal;
            let sigma = rng.gen_range(cfg.fine_sigma[0]..cfg.fine_sigma[1]);
            let rgb = jittered(texture(&p), cfg.detail_color_noise, &mut rng);
            gaussians.push(splat(p, Vector3::repeat(sigma), Quaternion::identity(), 0.75, rgb));
        }
    }
    let train_cameras = street_cameras(cfg, &mut rng, 0.0);
    let test_cameras = street_cameras(cfg, &mut rng, 0.5);
    Fixture { scene: Scene::new(gaussians, 0), train_cameras, test_cameras }
}

/// `phase` in [0, 1) shifts the cameras by that fraction of the spacing.
fn street_cameras(cfg: &DeepStreetConfig, rng: &mut ChaCha8Rng, phase: f64) -> Vec<Camera> {
    let n = cfg.n_cameras.max(1);
    let step = if n > 1 { (cfg.camera_x[1] - cfg.camera_x[0]) / (n - 1) as f64 } else { 0.0 };
    (0..n)
        .map(|i| {
            let x = (cfg.camera_x[0] + (i as f64 + phase) * step).min(cfg.camera_x[1]);
            let pos = Vector3::new(x, rng.gen_range(-1.0..1.0), cfg.camera_height + rng.gen_range(-0.1..0.1));
            let yaw: f64 = rng.gen_range(-0.15..0.15);
            let target = pos + Vector3::new(yaw.cos(), yaw.sin(), rng.gen_range(-0.03..0.03));
            Camera::look_at(pos, target, Vector3::z(), cfg.focal, cfg.width, cfg.height)
        })
        .collect()
}

/// Looking down +x from `position` with z up, using the fixture intrinsics.
pub fn street_camera(cfg: &DeepStreetConfig, position: Vector3<f64>) -> Camera {
    Camera::look_at(position, position + Vector3::x(), Vector3::z(), cfg.focal, cfg.width, cfg.height)
}

/// Random Gaussians in front of [`random_scene_camera`]: arbitrary rotations,
/// anisotropic scales, opacities and SH coefficients of the given degree.
pub fn random_scene(seed: u64, n: usize, sh_degree: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms = 3 * sh_terms(sh_degree);
    let gaussians = (0..n)
        .map(|_| {
            let mean = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(2.0..8.0));
            let scale = Vector3::from_fn(|_, _| rng.gen_range(0.02..0.4));
            let mut sh: Vec<f64> = (0..terms).map(|_| rng.gen_range(-0.6..0.6)).collect();
            for dc in sh.iter_mut().take(3) {
                *dc = rgb_to_sh_dc(rng.gen_range(0.0..1.0));
            }
            Gaussian {
                mean,
                scale,
                rotation: uniform_rotation(&mut rng).into_inner(),
                opacity: rng.gen_range(0.05..0.99),
                sh_coeffs: sh,
                filter_variance: 0.0,
            }
        })
        .collect();
    Scene::new(gaussians, sh_degree)
}

/// Camera at the origin looking down +z.
pub fn random_scene_camera(width: u32, height: u32) -> Camera {
    Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), width as f64, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::validate_scene;

    #[test]
    fn deep_street_is_valid_and_deterministic() {
        let cfg = DeepStreetConfig::default();
        let a = deep_street(&cfg);
        let b = deep_street(&cfg);
        assert_eq!(a.scene, b.scene);
        assert!(validate_scene(&a.scene).is_empty());
        let n = a.scene.len();
        assert!((20_000..=100_000).contains(&n), "{n} gaussians");
        assert_eq!(a.train_cameras.len(), 50);
        assert_eq!(a.test_cameras.len(), 50);
        assert!(a.train_cameras.iter().all(|c| c.validate().is_ok()));
    }

    #[test]
    fn random_scene_is_valid() {
        let s = random_scene(3, 200, 2);
        assert!(validate_scene(&s).is_empty());
        assert_eq!(s.sh_degree, 2);
    }
}
