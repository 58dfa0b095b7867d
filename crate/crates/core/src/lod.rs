//! LOD level construction: smoothing filter, importance scoring and pruning,
//! and distance-band active-set selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::{self, RasterConfig};
use crate::scene::{Camera, Gaussian, ImportanceScores, LodLevel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LodBuildConfig {
    /// Smoothing filter scale `s`; level `l` gets filter variance `s·d_l/f̄`.
    pub filter_scale: f64,
    /// Final importance prune threshold γ.
    pub gamma: f64,
    /// Prune rounds run at `q·γ` for each `q`, in order.
    pub prune_fractions: Vec<f64>,
    /// f̄ in pixels. Zero means "mean focal of the training cameras".
    pub reference_focal: f64,
    /// Use every n-th training camera for importance scoring.
    pub importance_view_stride: usize,
    pub raster: RasterConfig,
}

impl Default for LodBuildConfig {
    fn default() -> Self {
        Self {
            filter_scale: 0.02,
            gamma: 0.02,
            prune_fractions: vec![0.2, 0.6, 1.0],
            reference_focal: 0.0,
            importance_view_stride: 1,
            raster: RasterConfig::default(),
        }
    }
}

impl LodBuildConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.filter_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("filter_scale {} must be > 0", self.filter_scale)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {} must be in (0, 1]", self.gamma)));
        }
        let f = &self.prune_fractions;
        if f.is_empty() || f.windows(2).any(|w| w[0] >= w[1]) || *f.last().unwrap() != 1.0 || f[0] <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "prune_fractions {f:?} must be positive, strictly increasing and end at 1.0"
            )));
        }
        if !(self.reference_focal > 0.0) {
            return Err(Error::InvalidArgument("reference_focal must be resolved to a positive value".into()));
        }
        if self.importance_view_stride == 0 {
            return Err(Error::InvalidArgument("importance_view_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn filter_variance(&self, depth: f64) -> f64 {
        self.filter_scale * depth / self.reference_focal
    }

    /// Training cameras used for importance scoring.
    pub fn importance_views<'a>(&self, cameras: &'a [Camera]) -> Vec<&'a Camera> {
        cameras.iter().step_by(self.importance_view_stride.max(1)).collect()
    }
}

/// Copies level 0 and attaches the smoothing filter for depth `depth`.
/// Stored parameters are untouched; the opacity rescale happens at projection.
pub fn apply_smoothing_filter(level0: &LodLevel, level: usize, depth: f64, cfg: &LodBuildConfig) -> Result<LodLevel> {
    if !(depth > 0.0) {
        return Err(Error::InvalidArgument(format!("filter depth {depth} must be > 0")));
    }
    let variance = cfg.filter_variance(depth);
    let gaussians = level0
        .gaussians
        .iter()
        .map(|g| Gaussian { filter_variance: variance, ..g.clone() })
        .collect();
    Ok(LodLevel {
        level,
        depth_threshold: depth,
        gaussians,
        provenance: level0.provenance.clone(),
    })
}

/// Extra scoring views: random orientations at the original positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// Perturbed views per original view.
    pub count: usize,
    pub seed: u64,
}

/// Uniformly distributed random rotation (Shoemake's method).
pub fn uniform_rotation<R: Rng>(rng: &mut R) -> UnitQuaternion<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::from_quaternion(Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    ))
}

/// The original views followed by `count` random-orientation copies of each.
pub fn perturbed_views(views: &[&Camera], spec: &PerturbSpec) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out: Vec<Camera> = views.iter().map(|c| (*c).clone()).collect();
    for cam in views {
        for _ in 0..spec.count {
            out.push(cam.with_orientation(uniform_rotation(&mut rng)));
        }
    }
    out
}

/// Max composited weight of each item over every pixel of every view.
pub fn max_contribution(items: &[(&Gaussian, f64)], views: &[&Camera], raster: &RasterConfig) -> Vec<f64> {
    let cfg = RasterConfig { track_max_weight: true, ..*raster };
    views
        .par_iter()
        .map(|cam| {
            raster::render_items(items, cam, &cfg)
                .per_gaussian_max_weight
                .expect("max weight tracking enabled")
        })
        .reduce(
            || vec![0.0; items.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = x.max(y);
                }
                a
            },
        )
}

/// Importance score of every Gaussian in `level`: its maximum alpha-blend
/// weight over all pixels of all `views` (plus perturbed copies if given).
pub fn compute_importance(
    level: &LodLevel,
    views: &[&Camera],
    perturb: Option<&PerturbSpec>,
    cfg: &LodBuildConfig,
) -> Result<ImportanceScores> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("importance scoring needs at least one view".into()));
    }
    let items: Vec<(&Gaussian, f64)> = level.gaussians.iter().map(|g| (g, 1.0)).collect();
    let scores = match perturb {
        Some(spec) => {
            let all = perturbed_views(views, spec);
            let refs: Vec<&Camera> = all.iter().collect();
            max_contribution(&items, &refs, &cfg.raster)
        }
        None => max_contribution(&items, views, &cfg.raster),
    };
    Ok(ImportanceScores { scores, threshold_base: cfg.gamma })
}

/// Keeps exactly the Gaussians with `score >= threshold`, in order.
pub fn prune_level(level: &LodLevel, scores: &ImportanceScores, threshold: f64) -> LodLevel {
    assert_eq!(scores.scores.len(), level.len(), "scores must align with the level");
    let keep: Vec<usize> = (0..level.len()).filter(|&i| scores.scores[i] >= threshold).collect();
    LodLevel {
        level: level.level,
        depth_threshold: level.depth_threshold,
        gaussians: keep.iter().map(|&i| level.gaussians[i].clone()).collect(),
        provenance: keep.iter().map(|&i| level.provenance[i]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRound {
    pub fraction: f64,
    pub threshold: f64,
    pub count_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelBuildReport {
    pub level: usize,
    pub depth_threshold: f64,
    pub filter_variance: f64,
    pub count_before: usize,
    pub rounds: Vec<PruneRound>,
}

/// Filters level 0 at `depth`, then runs the pruning schedule, rescoring
/// before every round.
pub fn build_level(
    level0: &LodLevel,
    level: usize,
    depth: f64,
    views: &[&Camera],
    cfg: &LodBuildConfig,
) -> Result<(LodLevel, LevelBuildReport)> {
    cfg.validate()?;
    let mut current = apply_smoothing_filter(level0, level, depth, cfg)?;
    let mut report = LevelBuildReport {
        level,
        depth_threshold: depth,
        filter_variance: cfg.filter_variance(depth),
        count_before: current.len(),
        rounds: Vec::with_capacity(cfg.prune_fractions.len()),
    };
    for &q in &cfg.prune_fractions {
        let threshold = q * cfg.gamma;
        let scores = compute_importance(&current, views, None, cfg)?;
        current = prune_level(&current, &scores, threshold);
        log::debug!("level {level} d={depth:.3}: prune at {threshold:.4} -> {}", current.len());
        report.rounds.push(PruneRound { fraction: q, threshold, count_after: current.len() });
    }
    Ok((current, report))
}

/// Half-open distance band `[lo, hi)` of each level, with per-level offsets
/// added to the thresholds of levels `>= 1`.
pub fn band_bounds(thresholds: &[f64], offsets: &[f64]) -> Vec<(f64, f64)> {
    let lower = |l: usize| if l == 0 { 0.0 } else { thresholds[l] + offsets.get(l).copied().unwrap_or(0.0) };
    (0..thresholds.len())
        .map(|l| {
            let hi = if l + 1 < thresholds.len() { lower(l + 1) } else { f64::INFINITY };
            (lower(l), hi)
        })
        .collect()
}

fn check_thresholds(levels: &[LodLevel]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no LOD levels".into()));
    }
    if levels.windows(2).any(|w| !(w[0].depth_threshold < w[1].depth_threshold)) {
        return Err(Error::InvalidArgument("LOD depth thresholds must be strictly increasing".into()));
    }
    Ok(())
}

/// Per level, the indices of Gaussians whose distance to `query` falls in
/// that level's band. `offsets` may be empty (all zero).
pub fn select_active(levels: &[LodLevel], query: &Vector3<f64>, offsets: &[f64]) -> Result<Vec<Vec<u32>>> {
    check_thresholds(levels)?;
    if !offsets.is_empty() && offsets.len() != levels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} depth offsets for {} levels",
            offsets.len(),
            levels.len()
        )));
    }
    if offsets.iter().any(|&o| !(o >= 0.0)) {
        return Err(Error::InvalidArgument("depth offsets must be >= 0".into()));
    }
    let thresholds: Vec<f64> = levels.iter().map(|l| l.depth_threshold).collect();
    let bands = band_bounds(&thresholds, offsets);
    Ok(levels
        .iter()
        .zip(&bands)
        .map(|(level, &(lo, hi))| {
            if lo >= hi {
                return Vec::new();
            }
            level
                .gaussians
                .iter()
                .enumerate()
                .filter(|(_, g)| {
                    let d = (g.mean - query).norm();
                    lo <= d && d < hi
                })
                .map(|(i, _)| i as u32)
                .collect()
        })
        .collect())
}

/// Flattens per-level index sets into a render list with unit modulation.
pub fn gather<'a>(levels: &'a [LodLevel], sets: &[Vec<u32>]) -> Vec<(&'a Gaussian, f64)> {
    levels
        .iter()
        .zip(sets)
        .flat_map(|(level, set)| set.iter().map(move |&i| (&level.gaussians[i as usize], 1.0)))
        .collect()
}

/// Renders the active Gaussians for `cam` at its own position.
pub fn render_lod(levels: &[LodLevel], cam: &Camera, raster: &RasterConfig) -> Result<raster::TileRenderOutput> {
    let sets = select_active(levels, &cam.position, &[])?;
    Ok(raster::render_items(&gather(levels, &sets), cam, raster))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Scene;
    use nalgebra::Vector2;

    fn cfg() -> LodBuildConfig {
        LodBuildConfig { filter_scale: 1.0, reference_focal: 100.0, ..Default::default() }
    }

    fn axis_cam() -> Camera {
        Camera {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
            focal: Vector2::new(40.0, 40.0),
            principal_point: Vector2::new(16.0, 16.0),
            resolution: [32, 32],
            near_plane: 0.01,
        }
    }

    fn level_of(gs: Vec<Gaussian>) -> LodLevel {
        LodLevel::base(&Scene::new(gs, 0))
    }

    #[test]
    fn filter_sets_variance_from_formula() {
        let base = level_of(vec![Gaussian::isotropic(Vector3::new(0.0, 0.0, 5.0), 0.3, 0.5, [0.5; 3]); 4]);
        let l1 = apply_smoothing_filter(&base, 1, 10.0, &cfg()).unwrap();
        assert!(l1.gaussians.iter().all(|g| (g.filter_variance - 0.1).abs() < 1e-15));
        assert!(l1.gaussians.iter().zip(&base.gaussians).all(|(a, b)| a.scale == b.scale && a.opacity == b.opacity));
        assert_eq!(l1.provenance, base.provenance);
        assert!(apply_smoothing_filter(&base, 1, 0.0, &cfg()).is_err());
        assert!(apply_smoothing_filter(&base, 1, -1.0, &cfg()).is_err());
    }

    #[test]
    fn filter_opacity_factor_isotropic_unit() {
        let mut g = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, [0.5; 3]);
        g.filter_variance = 1.0;
        assert!((g.filter_opacity_factor() - 2f64.powf(-1.5)).abs() < 1e-15);
    }

    #[test]
    fn prune_threshold_cases() {
        let base = level_of(vec![Gaussian::isotropic(Vector3::zeros(), 0.3, 0.5, [0.5; 3]); 3]);
        let scores = ImportanceScores { scores: vec![0.1, 0.5, 0.9], threshold_base: 0.02 };
        assert_eq!(prune_level(&base, &scores, 0.0).len(), 3);
        assert_eq!(prune_level(&base, &scores, 1.5).len(), 0);
        assert_eq!(prune_level(&base, &scores, 0.5).provenance, vec![1, 2]);
    }

    #[test]
    fn importance_single_and_occluded_and_culled() {
        let cam = axis_cam();
        let views = [&cam];
        let c = LodBuildConfig { reference_focal: 40.0, ..Default::default() };
        // Frame-filling single splat.
        let alone = level_of(vec![Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 5.0, 0.9, [0.5; 3])]);
        let s = compute_importance(&alone, &views, None, &c).unwrap();
        assert!((s.scores[0] - 0.9).abs() < 0.01, "{}", s.scores[0]);
        // Opaque wall in front, small splat behind.
        let occluded = level_of(vec![
            Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 5.0, 1.0, [0.5; 3]),
            Gaussian::isotropic(Vector3::new(0.0, 0.0, 4.0), 0.1, 1.0, [0.5; 3]),
        ]);
        let s = compute_importance(&occluded, &views, None, &c).unwrap();
        assert!(s.scores[1] <= 0.01 + 1e-12, "{}", s.scores[1]);
        // Behind the camera.
        let culled = level_of(vec![Gaussian::isotropic(Vector3::new(0.0, 0.0, -2.0), 0.5, 0.9, [0.5; 3])]);
        assert_eq!(compute_importance(&culled, &views, None, &c).unwrap().scores[0], 0.0);
        assert!(compute_importance(&culled, &[], None, &c).is_err());
    }

    #[test]
    fn build_level_one_splat_is_noop() {
        let cam = axis_cam();
        let c = LodBuildConfig { reference_focal: 40.0, ..Default::default() };
        let base = level_of(vec![Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 5.0, 0.9, [0.5; 3])]);
        let (l1, report) = build_level(&base, 1, 5.0, &[&cam], &c).unwrap();
        assert_eq!(l1.len(), 1);
        assert_eq!(report.rounds.len(), 3);
        assert!(report.rounds.iter().all(|r| r.count_after == 1));
        assert_eq!(l1, apply_smoothing_filter(&base, 1, 5.0, &c).unwrap());
    }

    #[test]
    fn select_active_bands() {
        let base = level_of(vec![
            Gaussian::isotropic(Vector3::new(5.0, 0.0, 0.0), 0.1, 0.5, [0.5; 3]),
            Gaussian::isotropic(Vector3::new(15.0, 0.0, 0.0), 0.1, 0.5, [0.5; 3]),
        ]);
        let single = select_active(std::slice::from_ref(&base), &Vector3::zeros(), &[]).unwrap();
        assert_eq!(single, vec![vec![0, 1]]);

        let l1 = apply_smoothing_filter(&base, 1, 10.0, &cfg()).unwrap();
        let levels = vec![base.clone(), l1];
        let sets = select_active(&levels, &Vector3::zeros(), &[]).unwrap();
        assert_eq!(sets, vec![vec![0], vec![1]]);
        // Offsetting level 1 by 6 pushes its lower bound to 16.
        let sets = select_active(&levels, &Vector3::zeros(), &[0.0, 6.0]).unwrap();
        assert_eq!(sets, vec![vec![0, 1], vec![]]);
        // A level-0 offset is ignored.
        let sets = select_active(&levels, &Vector3::zeros(), &[3.0, 0.0]).unwrap();
        assert_eq!(sets, vec![vec![0], vec![1]]);

        let mut unsorted = levels.clone();
        unsorted[1].depth_threshold = 0.0;
        assert!(select_active(&unsorted, &Vector3::zeros(), &[]).is_err());
    }

    #[test]
    fn uniform_rotation_is_unit_and_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mean_forward = Vector3::zeros();
        for _ in 0..4000 {
            let q = uniform_rotation(&mut rng);
            assert!((q.quaternion().norm() - 1.0).abs() < 1e-12);
            mean_forward += q.inverse() * Vector3::z();
        }
        // Uniform rotations spread view directions over the sphere.
        assert!((mean_forward / 4000.0).norm() < 0.05);
    }
}
