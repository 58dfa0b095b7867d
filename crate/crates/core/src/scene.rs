//! Core domain types shared by every pipeline stage.
//!
//! Everything downstream of the base scene addresses Gaussians by index into
//! an ordered list, so the order of [`Scene::gaussians`] and of every
//! [`LodLevel::gaussians`] is stable and meaningful.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on the quaternion norm for a rotation to count as unit.
pub const UNIT_QUAT_TOL: f64 = 1e-6;

/// Number of SH coefficients per color channel for a given degree.
pub fn sh_terms(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Inverse of [`sh_terms`] over the total (3-channel) coefficient count.
pub fn sh_degree_for_len(len: usize) -> Option<usize> {
    (0..=3).find(|&d| 3 * sh_terms(d) == len)
}

/// One splat primitive.
///
/// The covariance is stored factored as `rotation · diag(scale²) · rotationᵀ`;
/// `filter_variance` is the isotropic smoothing term added on top of it
/// (zero for the base level).
///
/// `sh_coeffs` is coefficient-major: entry `3 * k + c` is term `k` of
/// channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// (w, x, y, z). Expected unit; normalized on use.
    pub rotation: Quaternion<f64>,
    pub opacity: f64,
    pub sh_coeffs: Vec<f64>,
    pub filter_variance: f64,
}

impl Gaussian {
    /// Isotropic, axis-aligned Gaussian with a constant color (degree 0).
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        Self {
            mean,
            scale: Vector3::repeat(sigma),
            rotation: Quaternion::identity(),
            opacity,
            sh_coeffs: rgb.iter().map(|&c| rgb_to_sh_dc(c)).collect(),
            filter_variance: 0.0,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        UnitQuaternion::from_quaternion(self.rotation).to_rotation_matrix().into_inner()
    }

    /// Σ = R·diag(scale²)·Rᵀ, without the filter term.
    pub fn base_covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = self.scale.component_mul(&self.scale);
        let cov = r * Matrix3::from_diagonal(&s2) * r.transpose();
        // Symmetrize away round-off.
        (cov + cov.transpose()) * 0.5
    }

    pub fn sh_degree(&self) -> Option<usize> {
        sh_degree_for_len(self.sh_coeffs.len())
    }

    /// The opacity rescale `sqrt(|Σ| / |Σ + v·I|)` that keeps the integral of
    /// the smoothed Gaussian equal to the original. Since `v·I` commutes with
    /// the rotation this is a product over the principal axes.
    pub fn filter_opacity_factor(&self) -> f64 {
        if self.filter_variance <= 0.0 {
            return 1.0;
        }
        self.scale
            .iter()
            .map(|s| {
                let s2 = s * s;
                (s2 / (s2 + self.filter_variance)).sqrt()
            })
            .product()
    }
}

/// SH DC coefficient that evaluates to `rgb` under the `0.5 + C0 * dc` rule.
pub fn rgb_to_sh_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / crate::raster::SH_C0
}

/// `R·diag(scale²)·Rᵀ + filter_variance·I`.
pub fn effective_covariance(g: &Gaussian) -> Matrix3<f64> {
    g.base_covariance() + Matrix3::identity() * g.filter_variance
}

/// Pinhole camera. `orientation` maps world directions into camera space
/// (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub focal: Vector2<f64>,
    pub principal_point: Vector2<f64>,
    pub resolution: [u32; 2],
    pub near_plane: f64,
}

impl Camera {
    pub const DEFAULT_NEAR: f64 = 0.01;

    /// Camera at `position` looking at `target`, principal point at the image
    /// center.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let forward = (target - position).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let orientation = UnitQuaternion::from_matrix(&rot);
        Self {
            position,
            orientation,
            focal: Vector2::new(focal, focal),
            principal_point: Vector2::new(width as f64 / 2.0, height as f64 / 2.0),
            resolution: [width, height],
            near_plane: Self::DEFAULT_NEAR,
        }
    }

    /// Builds a camera from COLMAP-style extrinsics, where `qvec` is the
    /// world-to-camera rotation (w, x, y, z) and `tvec` the translation so that
    /// `x_cam = R·x_world + t`.
    pub fn from_colmap(
        qvec: [f64; 4],
        tvec: [f64; 3],
        focal: [f64; 2],
        principal_point: [f64; 2],
        resolution: [u32; 2],
    ) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qvec[0], qvec[1], qvec[2], qvec[3]));
        let t = Vector3::from(tvec);
        let position = -(q.inverse() * t);
        Self {
            position,
            orientation: q,
            focal: Vector2::from(focal),
            principal_point: Vector2::from(principal_point),
            resolution,
            near_plane: Self::DEFAULT_NEAR,
        }
    }

    pub fn world_to_camera(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix().into_inner()
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.focal.x + self.focal.y)
    }

    pub fn width(&self) -> usize {
        self.resolution[0] as usize
    }

    pub fn height(&self) -> usize {
        self.resolution[1] as usize
    }

    /// Same intrinsics and position, different orientation.
    pub fn with_orientation(&self, orientation: UnitQuaternion<f64>) -> Self {
        Self { orientation, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.x > 0.0 && self.focal.y > 0.0) {
            return Err(Error::InvalidArgument("camera focal must be positive".into()));
        }
        if self.resolution[0] == 0 || self.resolution[1] == 0 {
            return Err(Error::InvalidArgument("camera resolution must be positive".into()));
        }
        if !(self.near_plane > 0.0) {
            return Err(Error::InvalidArgument("camera near plane must be positive".into()));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("camera position must be finite".into()));
        }
        Ok(())
    }
}

/// Mean of the per-camera mean focal lengths; the reference focal used by the
/// smoothing filter.
pub fn reference_focal(cameras: &[Camera]) -> Option<f64> {
    if cameras.is_empty() {
        return None;
    }
    Some(cameras.iter().map(Camera::mean_focal).sum::<f64>() / cameras.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
    pub up_axis_hint: Option<Vector3<f64>>,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: usize) -> Self {
        Self { gaussians, sh_degree, up_axis_hint: None }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NonPositiveScale,
    NonUnitRotation,
    OpacityOutOfRange,
    NegativeFilterVariance,
    ShLengthMismatch,
    NonFinite,
    ShDegreeOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// `None` for scene-level violations.
    pub gaussian: Option<usize>,
    pub kind: ViolationKind,
    pub detail: String,
}

/// Checks every type invariant and reports each violation; never fails.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    if scene.sh_degree > 3 {
        out.push(Violation {
            gaussian: None,
            kind: ViolationKind::ShDegreeOutOfRange,
            detail: format!("sh_degree {} not in 0..=3", scene.sh_degree),
        });
    }
    let expected_sh = 3 * sh_terms(scene.sh_degree);
    for (i, g) in scene.gaussians.iter().enumerate() {
        let mut push = |kind, detail: String| out.push(Violation { gaussian: Some(i), kind, detail });
        let finite = g.mean.iter().chain(g.scale.iter()).all(|v| v.is_finite())
            && g.rotation.coords.iter().all(|v| v.is_finite())
            && g.opacity.is_finite()
            && g.filter_variance.is_finite()
            && g.sh_coeffs.iter().all(|v| v.is_finite());
        if !finite {
            push(ViolationKind::NonFinite, "non-finite field".into());
            continue;
        }
        if g.scale.iter().any(|&s| s <= 0.0) {
            push(ViolationKind::NonPositiveScale, format!("scale {:?} must be > 0", g.scale.as_slice()));
        }
        let norm = g.rotation.norm();
        if (norm - 1.0).abs() > UNIT_QUAT_TOL {
            push(ViolationKind::NonUnitRotation, format!("rotation norm {norm} is not unit"));
        }
        if !(0.0..=1.0).contains(&g.opacity) {
            push(ViolationKind::OpacityOutOfRange, format!("opacity {} not in [0,1]", g.opacity));
        }
        if g.filter_variance < 0.0 {
            push(
                ViolationKind::NegativeFilterVariance,
                format!("filter_variance {} < 0", g.filter_variance),
            );
        }
        if g.sh_coeffs.len() != expected_sh {
            push(
                ViolationKind::ShLengthMismatch,
                format!("{} sh coefficients, expected {expected_sh}", g.sh_coeffs.len()),
            );
        }
    }
    out
}

/// One level of detail: a depth threshold and the Gaussians valid beyond it.
#[derive(Debug, Clone, PartialEq)]
pub struct LodLevel {
    pub level: usize,
    pub depth_threshold: f64,
    pub gaussians: Vec<Gaussian>,
    /// Index of each Gaussian's level-0 ancestor.
    pub provenance: Vec<u32>,
}

impl LodLevel {
    /// Level 0 over the base scene: threshold 0, identity provenance.
    pub fn base(scene: &Scene) -> Self {
        Self {
            level: 0,
            depth_threshold: 0.0,
            gaussians: scene.gaussians.clone(),
            provenance: (0..scene.gaussians.len() as u32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Per-chunk, per-level sorted index sets into the level Gaussian lists.
pub type ActiveSets = Vec<Vec<u32>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPlan {
    pub centers: Vec<Vector3<f64>>,
    pub radii: Vec<f64>,
    /// `active_sets[chunk][level]`.
    pub active_sets: Vec<ActiveSets>,
    /// Chunk id of each training camera.
    pub source_camera_assignment: Vec<usize>,
}

impl ChunkPlan {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Checks the structural invariants.
    pub fn validate(&self, level_sizes: &[usize]) -> Result<()> {
        let n = self.centers.len();
        if n == 0 || self.radii.len() != n || self.active_sets.len() != n {
            return Err(Error::Invariant(format!(
                "chunk plan sizes disagree: {} centers, {} radii, {} active sets",
                n,
                self.radii.len(),
                self.active_sets.len()
            )));
        }
        for (j, sets) in self.active_sets.iter().enumerate() {
            if sets.len() != level_sizes.len() {
                return Err(Error::Invariant(format!(
                    "chunk {j} has {} level sets, expected {}",
                    sets.len(),
                    level_sizes.len()
                )));
            }
            for (l, set) in sets.iter().enumerate() {
                check_index_set(set, level_sizes[l])
                    .map_err(|e| Error::Invariant(format!("chunk {j} level {l}: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Sorted, duplicate-free, and every entry `< len`.
pub fn check_index_set(set: &[u32], len: usize) -> std::result::Result<(), String> {
    if let Some(w) = set.windows(2).find(|w| w[0] >= w[1]) {
        return Err(format!("index set not strictly increasing at {} -> {}", w[0], w[1]));
    }
    if let Some(&last) = set.last() {
        if last as usize >= len {
            return Err(format!("index {last} out of range for {len} gaussians"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    pub threshold_base: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).abs().max()
    }

    fn unit(scale: [f64; 3], rot: UnitQuaternion<f64>, fv: f64) -> Gaussian {
        Gaussian {
            mean: Vector3::zeros(),
            scale: Vector3::from(scale),
            rotation: rot.into_inner(),
            opacity: 0.5,
            sh_coeffs: vec![0.0; 3],
            filter_variance: fv,
        }
    }

    #[test]
    fn covariance_identity_cases() {
        let g = unit([1.0, 1.0, 1.0], UnitQuaternion::identity(), 0.0);
        assert!(max_abs_diff(&effective_covariance(&g), &Matrix3::identity()) < 1e-15);
        let g = unit([1.0, 1.0, 1.0], UnitQuaternion::identity(), 1.0);
        assert!(max_abs_diff(&effective_covariance(&g), &(Matrix3::identity() * 2.0)) < 1e-15);
    }

    #[test]
    fn covariance_rotated_about_z() {
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let g = unit([2.0, 1.0, 1.0], rot, 0.0);
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!(max_abs_diff(&effective_covariance(&g), &expected) < 1e-12);
    }

    fn well_formed() -> Scene {
        Scene::new(
            (0..3)
                .map(|i| Gaussian::isotropic(Vector3::new(i as f64, 0.0, 0.0), 0.1, 0.5, [0.2, 0.4, 0.6]))
                .collect(),
            0,
        )
    }

    #[test]
    fn validate_reports_each_violation() {
        assert!(validate_scene(&well_formed()).is_empty());

        let mut s = well_formed();
        s.gaussians[1].opacity = 1.5;
        let v = validate_scene(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].gaussian, Some(1));
        assert_eq!(v[0].kind, ViolationKind::OpacityOutOfRange);

        let mut s = well_formed();
        s.gaussians[2].rotation = Quaternion::new(0.9, 0.0, 0.0, 0.0);
        let v = validate_scene(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].gaussian, Some(2));
        assert_eq!(v[0].kind, ViolationKind::NonUnitRotation);
    }

    #[test]
    fn colmap_position_is_camera_center() {
        let q = UnitQuaternion::from_euler_angles(0.1, -0.3, 0.7);
        let c = Vector3::new(1.0, -2.0, 3.5);
        let t = -(q * c);
        let qv = q.into_inner();
        let cam = Camera::from_colmap([qv.w, qv.i, qv.j, qv.k], t.into(), [100.0; 2], [32.0; 2], [64, 64]);
        assert!((cam.position - c).norm() < 1e-12);
    }

    #[test]
    fn look_at_maps_target_onto_optical_axis() {
        let cam = Camera::look_at(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(5.0, 2.0, 3.0),
            Vector3::z(),
            100.0,
            64,
            48,
        );
        let p = cam.world_to_camera() * (Vector3::new(5.0, 2.0, 3.0) - cam.position);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && (p.z - 4.0).abs() < 1e-12);
        // World up maps to camera -y.
        let up = cam.world_to_camera() * Vector3::z();
        assert!((up.y + 1.0).abs() < 1e-12);
    }
}
