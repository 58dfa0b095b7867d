//! End-to-end build: threshold search, level construction, chunking and
//! asset encoding.

use serde::{Deserialize, Serialize};

use crate::chunk::{self, ChunkBuildConfig, ChunkSummary};
use crate::io::asset::{self, AssetParams, BuildMetadata, EncodedAsset, RenderIntrinsics};
use crate::lod::{self, LevelBuildReport, LodBuildConfig};
use crate::scene::{reference_focal, validate_scene, Camera, ChunkPlan, LodLevel, Scene};
use crate::threshold::{self, CostModel, SearchConfig, SearchResult};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchOptions {
    pub max_levels: usize,
    pub rel_tol: f64,
    /// Size of the default log-spaced grid.
    pub grid_points: usize,
    /// Explicit candidate depths; replaces the default grid.
    pub grid: Option<Vec<f64>>,
    /// Use every n-th training camera as a cost view.
    pub view_stride: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self { max_levels: s.max_levels, rel_tol: s.rel_tol, grid_points: 16, grid: None, view_stride: 1 }
    }
}

impl SearchOptions {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig { max_levels: self.max_levels, rel_tol: self.rel_tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub lod: LodBuildConfig,
    pub chunk: ChunkBuildConfig,
    pub search: SearchOptions,
    /// Fixed depth thresholds; skips the search when set.
    pub thresholds: Option<Vec<f64>>,
    pub visibility_filter: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            lod: LodBuildConfig::default(),
            chunk: ChunkBuildConfig::default(),
            search: SearchOptions::default(),
            thresholds: None,
            visibility_filter: true,
        }
    }
}

impl BuildConfig {
    /// Copy with `reference_focal` filled from the cameras when unset.
    pub fn resolved(&self, cameras: &[Camera]) -> Result<Self> {
        let mut cfg = self.clone();
        if cfg.lod.reference_focal <= 0.0 {
            cfg.lod.reference_focal = reference_focal(cameras)
                .ok_or_else(|| Error::InvalidArgument("no cameras to derive the reference focal from".into()))?;
        }
        cfg.lod.validate()?;
        if cfg.search.view_stride == 0 {
            return Err(Error::InvalidArgument("search view_stride must be >= 1".into()));
        }
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        asset::sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub gaussian_count: usize,
    pub camera_count: usize,
    pub reference_focal: f64,
    pub config_hash: String,
    pub grid: Vec<f64>,
    pub search: Option<SearchResult>,
    pub thresholds: Vec<f64>,
    pub levels: Vec<LevelBuildReport>,
    pub level_sizes: Vec<usize>,
    pub chunk_count: usize,
    pub chunks: Vec<ChunkSummary>,
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub config: BuildConfig,
    pub levels: Vec<LodLevel>,
    pub plan: ChunkPlan,
    pub report: BuildReport,
    pub asset: EncodedAsset,
}

pub fn check_scene(scene: &Scene) -> Result<()> {
    if scene.is_empty() {
        return Err(Error::InvalidArgument("scene has no gaussians".into()));
    }
    let v = validate_scene(scene);
    if let Some(first) = v.first() {
        return Err(Error::InvalidArgument(format!(
            "{} invalid gaussians; first: {:?} {:?} {}",
            v.len(),
            first.gaussian,
            first.kind,
            first.detail
        )));
    }
    Ok(())
}

/// Candidate grid for `cfg`: the explicit one or the default log grid.
pub fn search_grid(base: &LodLevel, cameras: &[Camera], opts: &SearchOptions) -> Result<Vec<f64>> {
    let grid = match &opts.grid {
        Some(g) => g.clone(),
        None => threshold::default_grid(base, cameras, opts.grid_points)?,
    };
    if grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grid is empty".into()));
    }
    if grid.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument("threshold grid values must be positive and finite".into()));
    }
    Ok(grid)
}

/// Greedy threshold search with the cost views taken from the training
/// cameras at `view_stride`. `cfg` must be resolved.
pub fn search_thresholds(base: &LodLevel, cameras: &[Camera], cfg: &BuildConfig) -> Result<(Vec<f64>, SearchResult)> {
    let grid = search_grid(base, cameras, &cfg.search)?;
    let views: Vec<(usize, &Camera)> = cameras.iter().enumerate().step_by(cfg.search.view_stride).collect();
    let model = CostModel::with_view_subset(base, views, cameras, &cfg.lod)?;
    let result = model.greedy_search(&grid, &cfg.search.search_config())?;
    Ok((grid, result))
}

/// Level 0 plus one filtered and pruned level per threshold.
pub fn build_levels(
    base: &LodLevel,
    thresholds: &[f64],
    cameras: &[Camera],
    cfg: &LodBuildConfig,
) -> Result<(Vec<LodLevel>, Vec<LevelBuildReport>)> {
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) || thresholds.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "thresholds {thresholds:?} must be positive, finite and strictly increasing"
        )));
    }
    let views = cfg.importance_views(cameras);
    let mut levels = vec![base.clone()];
    let mut reports = Vec::with_capacity(thresholds.len());
    for (l, &d) in thresholds.iter().enumerate() {
        let (level, report) = lod::build_level(base, l + 1, d, &views, cfg)?;
        log::info!("level {} at d={d:.3}: {} -> {} gaussians", l + 1, report.count_before, level.len());
        levels.push(level);
        reports.push(report);
    }
    Ok((levels, reports))
}

pub fn build(scene: &Scene, cameras: &[Camera], cfg: &BuildConfig) -> Result<BuildOutput> {
    check_scene(scene).map_err(|e| e.in_stage("validate"))?;
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("no cameras".into()).in_stage("validate"));
    }
    let cfg = cfg.resolved(cameras).map_err(|e| e.in_stage("config"))?;
    let base = LodLevel::base(scene);

    let (grid, search, thresholds) = match &cfg.thresholds {
        Some(t) => (Vec::new(), None, t.clone()),
        None => {
            let (grid, result) = search_thresholds(&base, cameras, &cfg).map_err(|e| e.in_stage("search"))?;
            let t = result.thresholds.clone();
            (grid, Some(result), t)
        }
    };
    log::info!("thresholds: {thresholds:?}");

    let (levels, level_reports) =
        build_levels(&base, &thresholds, cameras, &cfg.lod).map_err(|e| e.in_stage("levels"))?;

    let d1 = thresholds.first().copied().unwrap_or(f64::INFINITY);
    let (plan, summaries) = chunk::plan_chunks(&levels, cameras, d1, &cfg.chunk, &cfg.lod, cfg.visibility_filter)
        .map_err(|e| e.in_stage("chunks"))?;
    log::info!("{} chunks", plan.len());

    let config_hash = cfg.hash();
    let params = AssetParams {
        sh_degree: scene.sh_degree,
        reference_focal: cfg.lod.reference_focal,
        filter_scale: cfg.lod.filter_scale,
        gamma: cfg.lod.gamma,
        render_camera: RenderIntrinsics::from_camera(&cameras[0]),
        build: BuildMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            kmeans_seed: cfg.chunk.kmeans_seed,
            perturb_seed: cfg.chunk.perturb_seed,
            config_hash: config_hash.clone(),
            thresholds_searched: search.is_some(),
        },
    };
    let encoded = asset::encode_asset(&levels, &plan, &params).map_err(|e| e.in_stage("asset"))?;

    let report = BuildReport {
        gaussian_count: scene.len(),
        camera_count: cameras.len(),
        reference_focal: cfg.lod.reference_focal,
        config_hash,
        grid,
        search,
        thresholds,
        levels: level_reports,
        level_sizes: levels.iter().map(LodLevel::len).collect(),
        chunk_count: plan.len(),
        chunks: summaries,
    };
    Ok(BuildOutput { config: cfg, levels, plan, report, asset: encoded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use nalgebra::Vector3;

    fn small() -> (Scene, Vec<Camera>) {
        let mut gs = Vec::new();
        for i in 0..40 {
            let x = 2.0 + i as f64 * 0.5;
            gs.push(Gaussian::isotropic(Vector3::new(x, 0.3, 0.0), 0.2, 0.8, [0.5, 0.3, 0.2]));
            gs.push(Gaussian::isotropic(Vector3::new(x, -0.3, 0.1), 0.01, 0.8, [0.4, 0.3, 0.2]));
        }
        let cams = (0..4)
            .map(|i| {
                let p = Vector3::new(i as f64, 0.0, 0.0);
                Camera::look_at(p, p + Vector3::x(), Vector3::z(), 40.0, 48, 32)
            })
            .collect();
        (Scene::new(gs, 0), cams)
    }

    #[test]
    fn fixed_thresholds_skip_search() {
        let (scene, cams) = small();
        let cfg = BuildConfig { thresholds: Some(vec![5.0]), ..Default::default() };
        let out = build(&scene, &cams, &cfg).unwrap();
        assert!(out.report.search.is_none());
        assert_eq!(out.levels.len(), 2);
        assert_eq!(out.report.thresholds, vec![5.0]);
        assert!(!out.asset.manifest.build.thresholds_searched);
        assert_eq!(out.config.lod.reference_focal, 40.0);
    }

    #[test]
    fn errors_carry_stage() {
        let (scene, cams) = small();
        let cfg = BuildConfig { thresholds: Some(vec![5.0, 3.0]), ..Default::default() };
        let e = build(&scene, &cams, &cfg).unwrap_err();
        assert!(matches!(e, Error::Stage { stage: "levels", .. }), "{e}");
        let e = build(&Scene::new(vec![], 0), &cams, &BuildConfig::default()).unwrap_err();
        assert!(e.to_string().starts_with("validate"), "{e}");
    }

    #[test]
    fn build_is_deterministic() {
        let (scene, cams) = small();
        let cfg = BuildConfig { search: SearchOptions { grid_points: 4, ..Default::default() }, ..Default::default() };
        let a = build(&scene, &cams, &cfg).unwrap();
        let b = build(&scene, &cams, &cfg).unwrap();
        assert_eq!(a.asset, b.asset);
    }
}
