//! Depth-threshold selection by minimizing the mean number of splats binned
//! per tile over a set of views.
//!
//! Every candidate threshold needs a provisional level (filter + one prune
//! round at γ). A provisional level depends only on its own depth, so
//! [`CostModel`] caches them and the greedy search, the exhaustive oracle and
//! the cost surface all share the work.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lod::{self, LodBuildConfig};
use crate::raster;
use crate::scene::{Camera, LodLevel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEvaluation {
    pub thresholds: Vec<f64>,
    pub mean_gaussians_per_tile: f64,
    pub per_view_cost: Vec<f64>,
    pub views_used: Vec<usize>,
    /// Total Gaussians across all levels.
    pub build_cost_proxy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 1-based index of the threshold being searched.
    pub step: usize,
    pub candidate: f64,
    pub cost: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub thresholds: Vec<f64>,
    /// Cost with no LOD levels.
    pub baseline_cost: f64,
    /// Cost after each accepted threshold.
    pub accepted_costs: Vec<f64>,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Maximum number of thresholds (LOD levels beyond level 0).
    pub max_levels: usize,
    /// Stop when the best new threshold improves cost by less than this
    /// fraction.
    pub rel_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { max_levels: 2, rel_tol: 0.02 }
    }
}

/// Tile-cost objective over a fixed base level and view set.
pub struct CostModel<'a> {
    base: &'a LodLevel,
    views: Vec<(usize, &'a Camera)>,
    scoring_views: Vec<&'a Camera>,
    cfg: &'a LodBuildConfig,
    cache: Mutex<HashMap<u64, Arc<LodLevel>>>,
}

impl<'a> CostModel<'a> {
    /// `views` are the cost views; importance scoring uses the training
    /// cameras selected by `cfg`.
    pub fn new(base: &'a LodLevel, views: &'a [Camera], training: &'a [Camera], cfg: &'a LodBuildConfig) -> Result<Self> {
        Self::with_view_subset(base, views.iter().enumerate().collect(), training, cfg)
    }

    pub fn with_view_subset(
        base: &'a LodLevel,
        views: Vec<(usize, &'a Camera)>,
        training: &'a [Camera],
        cfg: &'a LodBuildConfig,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidArgument("cost evaluation needs at least one view".into()));
        }
        cfg.validate()?;
        let scoring_views = cfg.importance_views(training);
        if scoring_views.is_empty() {
            return Err(Error::InvalidArgument("no importance views".into()));
        }
        Ok(Self { base, views, scoring_views, cfg, cache: Mutex::new(HashMap::new()) })
    }

    /// Filter at `depth` plus a single prune round at γ.
    pub fn provisional_level(&self, depth: f64) -> Result<Arc<LodLevel>> {
        let key = depth.to_bits();
        if let Some(l) = self.cache.lock().unwrap().get(&key) {
            return Ok(l.clone());
        }
        let filtered = lod::apply_smoothing_filter(self.base, 1, depth, self.cfg)?;
        let scores = lod::compute_importance(&filtered, &self.scoring_views, None, self.cfg)?;
        let level = Arc::new(lod::prune_level(&filtered, &scores, self.cfg.gamma));
        self.cache.lock().unwrap().insert(key, level.clone());
        Ok(level)
    }

    /// Builds all provisional levels for `grid` up front, in parallel.
    pub fn prepare(&self, grid: &[f64]) -> Result<()> {
        grid.par_iter().try_for_each(|&d| self.provisional_level(d).map(|_| ()))
    }

    pub fn evaluate(&self, thresholds: &[f64]) -> Result<CostEvaluation> {
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) || thresholds.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "thresholds {thresholds:?} must be positive and strictly increasing"
            )));
        }
        let mut levels = vec![self.base.clone()];
        for (l, &d) in thresholds.iter().enumerate() {
            let mut level = (*self.provisional_level(d)?).clone();
            level.level = l + 1;
            levels.push(level);
        }
        let per_view_cost = self
            .views
            .par_iter()
            .map(|(_, cam)| view_tile_cost(&levels, cam, self.cfg))
            .collect::<Result<Vec<f64>>>()?;
        let mean = per_view_cost.iter().sum::<f64>() / per_view_cost.len() as f64;
        Ok(CostEvaluation {
            thresholds: thresholds.to_vec(),
            mean_gaussians_per_tile: mean,
            per_view_cost,
            views_used: self.views.iter().map(|(i, _)| *i).collect(),
            build_cost_proxy: levels.iter().map(LodLevel::len).sum(),
        })
    }

    fn cost(&self, thresholds: &[f64]) -> Result<f64> {
        Ok(self.evaluate(thresholds)?.mean_gaussians_per_tile)
    }

    /// Greedy 1-D search: each step fixes the accepted thresholds and scans
    /// the grid above the last one for the cost-minimizing next threshold.
    pub fn greedy_search(&self, grid: &[f64], search: &SearchConfig) -> Result<SearchResult> {
        check_grid(grid)?;
        if search.max_levels == 0 {
            return Err(Error::InvalidArgument("max_levels must be >= 1".into()));
        }
        self.prepare(grid)?;
        let baseline = self.cost(&[])?;
        let mut result = SearchResult {
            thresholds: Vec::new(),
            baseline_cost: baseline,
            accepted_costs: Vec::new(),
            trace: Vec::new(),
        };
        let mut current = baseline;
        for step in 1..=search.max_levels {
            let lower = result.thresholds.last().copied().unwrap_or(0.0);
            let candidates: Vec<f64> = grid.iter().copied().filter(|&d| d > lower).collect();
            if candidates.is_empty() {
                break;
            }
            let costs = candidates
                .par_iter()
                .map(|&d| {
                    let mut t = result.thresholds.clone();
                    t.push(d);
                    self.cost(&t)
                })
                .collect::<Result<Vec<f64>>>()?;
            // First minimum wins on ties, so the result is independent of
            // evaluation order.
            let (best_i, &best) = costs
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            let accept = if current > 0.0 { (current - best) / current >= search.rel_tol } else { false };
            for (i, (&d, &c)) in candidates.iter().zip(&costs).enumerate() {
                result.trace.push(TraceEntry { step, candidate: d, cost: c, accepted: accept && i == best_i });
            }
            if !accept {
                break;
            }
            result.thresholds.push(candidates[best_i]);
            result.accepted_costs.push(best);
            current = best;
        }
        Ok(result)
    }

    /// Cost at every `(d1, d2)` pair of grid points; `None` where `d1 >= d2`.
    pub fn surface(&self, grid: &[f64]) -> Result<CostSurface> {
        check_grid(grid)?;
        self.prepare(grid)?;
        let n = grid.len();
        let cells: Vec<Option<f64>> = (0..n * n)
            .into_par_iter()
            .map(|k| {
                let (i, j) = (k / n, k % n);
                if grid[i] < grid[j] {
                    self.cost(&[grid[i], grid[j]]).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(CostSurface {
            grid: grid.to_vec(),
            costs: cells.chunks(n).map(<[_]>::to_vec).collect(),
        })
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid[0] <= 0.0 {
        return Err(Error::InvalidArgument("threshold grid must be positive and strictly ascending".into()));
    }
    Ok(())
}

/// Mean per-tile binned count for one view with LOD selection at the
/// camera position.
pub fn view_tile_cost(levels: &[LodLevel], cam: &Camera, cfg: &LodBuildConfig) -> Result<f64> {
    let sets = lod::select_active(levels, &cam.position, &[])?;
    let items = lod::gather(levels, &sets);
    let splats = raster::project_all(&items, cam, &cfg.raster);
    let counts = raster::tile_bin_counts(&splats, cam);
    Ok(counts.iter().map(|&c| c as f64).sum::<f64>() / counts.len() as f64)
}

/// Uncached one-off evaluation of the tile-cost objective.
pub fn evaluate_cost(
    base: &LodLevel,
    thresholds: &[f64],
    views: &[Camera],
    training: &[Camera],
    cfg: &LodBuildConfig,
) -> Result<CostEvaluation> {
    CostModel::new(base, views, training, cfg)?.evaluate(thresholds)
}

pub fn greedy_search(
    base: &LodLevel,
    views: &[Camera],
    training: &[Camera],
    cfg: &LodBuildConfig,
    grid: &[f64],
    search: &SearchConfig,
) -> Result<SearchResult> {
    CostModel::new(base, views, training, cfg)?.greedy_search(grid, search)
}

pub fn cost_surface(
    base: &LodLevel,
    views: &[Camera],
    training: &[Camera],
    cfg: &LodBuildConfig,
    grid: &[f64],
) -> Result<CostSurface> {
    CostModel::new(base, views, training, cfg)?.surface(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSurface {
    pub grid: Vec<f64>,
    /// `costs[i][j]` is the cost of thresholds `(grid[i], grid[j])`.
    pub costs: Vec<Vec<Option<f64>>>,
}

impl CostSurface {
    /// Lowest valid cell as `(i, j, cost)`, first in row-major order on ties.
    pub fn argmin(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in self.costs.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if let Some(c) = *c {
                    if best.is_none_or(|b| c < b.2) {
                        best = Some((i, j, c));
                    }
                }
            }
        }
        best
    }

    /// `d1,d2,cost` rows; invalid pairs have cost `invalid`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "d1,d2,cost")?;
        for (i, row) in self.costs.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                match c {
                    Some(c) => writeln!(w, "{},{},{}", self.grid[i], self.grid[j], c)?,
                    None => writeln!(w, "{},{},invalid", self.grid[i], self.grid[j])?,
                }
            }
        }
        Ok(())
    }
}

/// `n` log-spaced depths between the 5th and 95th percentile of
/// Gaussian-to-camera distances.
pub fn default_grid(base: &LodLevel, cameras: &[Camera], n: usize) -> Result<Vec<f64>> {
    if base.is_empty() || cameras.is_empty() || n == 0 {
        return Err(Error::InvalidArgument("default grid needs gaussians, cameras and n >= 1".into()));
    }
    let mut d: Vec<f64> = cameras
        .par_iter()
        .flat_map_iter(|c| base.gaussians.iter().map(move |g| (g.mean - c.position).norm()))
        .collect();
    d.sort_by(f64::total_cmp);
    let pct = |p: f64| d[((d.len() - 1) as f64 * p).round() as usize];
    let (lo, hi) = (pct(0.05).max(1e-6), pct(0.95));
    if n == 1 || hi <= lo {
        return Ok(vec![lo]);
    }
    let ratio = (hi / lo).ln();
    Ok((0..n).map(|k| lo * (ratio * k as f64 / (n - 1) as f64).exp()).collect())
}
