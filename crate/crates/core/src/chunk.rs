//! Camera-space chunking: K-means over training-camera positions, per-chunk
//! active sets with radius-offset depth bands, and per-chunk visibility
//! filtering with orientation-perturbed views.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lod::{self, LodBuildConfig, PerturbSpec};
use crate::scene::{ActiveSets, Camera, ChunkPlan, LodLevel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbLaw {
    /// Orientations drawn uniformly over SO(3).
    #[default]
    UniformRotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkBuildConfig {
    pub kmeans_seed: u64,
    pub kmeans_iters: usize,
    pub perturb_count: usize,
    pub perturb_law: PerturbLaw,
    pub perturb_seed: u64,
    /// Per-chunk prune threshold; `None` means γ.
    pub vis_threshold: Option<f64>,
}

impl Default for ChunkBuildConfig {
    fn default() -> Self {
        Self {
            kmeans_seed: 0,
            kmeans_iters: 50,
            perturb_count: 4,
            perturb_law: PerturbLaw::UniformRotation,
            perturb_seed: 0,
            vis_threshold: None,
        }
    }
}

/// `ceil((4/d1) · max_i ‖c_i − c̄‖)`, clamped to `[1, N_cameras]`.
pub fn n_clusters(cameras: &[Vector3<f64>], d1: f64) -> usize {
    if cameras.is_empty() {
        return 1;
    }
    let mean = cameras.iter().sum::<Vector3<f64>>() / cameras.len() as f64;
    let spread = cameras.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    let raw = (4.0 / d1 * spread).ceil();
    if !raw.is_finite() {
        return if raw > 0.0 { cameras.len() } else { 1 };
    }
    (raw.max(1.0) as usize).clamp(1, cameras.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vector3<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn nearest(p: &Vector3<f64>, centers: &[Vector3<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a fixed seed.
pub fn kmeans_positions(points: &[Vector3<f64>], k: usize, seed: u64, iters: usize) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!("k = {k} clusters for {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - points[chosen[0]]).norm_squared()).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.unwrap()
        } else {
            // All remaining points coincide with a center.
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min((p - points[next]).norm_squared());
        }
    }
    let mut centers: Vec<Vector3<f64>> = chosen.iter().map(|&i| points[i]).collect();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            sums[a] += p;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
        // Re-seed empty clusters from the point farthest from its center.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = (points[a] - centers[assignment[a]]).norm_squared();
                        let db = (points[b] - centers[assignment[b]]).norm_squared();
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                counts[assignment[far]] -= 1;
                centers[j] = points[far];
                assignment[far] = j;
                counts[j] = 1;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(KMeans { centers, assignment, iterations })
}

/// Distance from each center to its nearest other center. With a single
/// center the radius falls back to the largest camera-to-center distance.
pub fn chunk_radii(centers: &[Vector3<f64>], cameras: &[Vector3<f64>]) -> Vec<f64> {
    if centers.len() == 1 {
        let r = cameras.iter().map(|c| (c - centers[0]).norm()).fold(0.0, f64::max);
        return vec![r];
    }
    centers
        .iter()
        .enumerate()
        .map(|(j, m)| {
            centers
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, o)| (m - o).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Per-level depth offsets for a chunk of the given radius.
pub fn chunk_offsets(levels: usize, radius: f64) -> Vec<f64> {
    (0..levels).map(|l| if l == 0 { 0.0 } else { radius }).collect()
}

/// Active sets at each chunk center with every threshold `l >= 1` pushed out
/// by the chunk radius.
pub fn build_chunk_active_sets(levels: &[LodLevel], centers: &[Vector3<f64>], radii: &[f64]) -> Result<Vec<ActiveSets>> {
    if centers.len() != radii.len() {
        return Err(Error::InvalidArgument("centers and radii differ in length".into()));
    }
    centers
        .par_iter()
        .zip(radii)
        .map(|(m, &r)| lod::select_active(levels, m, &chunk_offsets(levels.len(), r)))
        .collect()
}

/// Importance-prunes one chunk's active sets using the chunk's cameras plus
/// `perturb_count` random-orientation copies of each. Never adds indices.
pub fn visibility_filter_chunk(
    active: &ActiveSets,
    chunk_id: usize,
    levels: &[LodLevel],
    cameras_in_chunk: &[&Camera],
    cfg: &ChunkBuildConfig,
    lod_cfg: &LodBuildConfig,
) -> ActiveSets {
    if cameras_in_chunk.is_empty() {
        log::warn!("chunk {chunk_id} has no cameras; skipping visibility filtering");
        return active.clone();
    }
    let threshold = cfg.vis_threshold.unwrap_or(lod_cfg.gamma);
    let spec = PerturbSpec { count: cfg.perturb_count, seed: chunk_seed(cfg.perturb_seed, chunk_id) };
    let views = lod::perturbed_views(cameras_in_chunk, &spec);
    let refs: Vec<&Camera> = views.iter().collect();
    let items = lod::gather(levels, active);
    let scores = lod::max_contribution(&items, &refs, &lod_cfg.raster);
    let mut k = 0;
    active
        .iter()
        .map(|set| {
            set.iter()
                .copied()
                .filter(|_| {
                    let keep = scores[k] >= threshold;
                    k += 1;
                    keep
                })
                .collect()
        })
        .collect()
}

fn chunk_seed(seed: u64, chunk_id: usize) -> u64 {
    seed ^ (chunk_id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSummary {
    pub chunk: usize,
    pub center: [f64; 3],
    pub radius: f64,
    pub camera_count: usize,
    pub sizes_before: Vec<usize>,
    pub sizes_after: Vec<usize>,
}

/// Full chunking stage: cluster count from `d1`, K-means, radii, active
/// sets, and visibility filtering (skipped when `filter` is false).
pub fn plan_chunks(
    levels: &[LodLevel],
    cameras: &[Camera],
    d1: f64,
    cfg: &ChunkBuildConfig,
    lod_cfg: &LodBuildConfig,
    filter: bool,
) -> Result<(ChunkPlan, Vec<ChunkSummary>)> {
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("chunking needs at least one camera".into()));
    }
    let positions: Vec<Vector3<f64>> = cameras.iter().map(|c| c.position).collect();
    let k = n_clusters(&positions, d1);
    let km = kmeans_positions(&positions, k, cfg.kmeans_seed, cfg.kmeans_iters)?;
    let radii = chunk_radii(&km.centers, &positions);
    let raw = build_chunk_active_sets(levels, &km.centers, &radii)?;
    let filtered: Vec<ActiveSets> = if filter {
        raw.par_iter()
            .enumerate()
            .map(|(j, sets)| {
                let cams: Vec<&Camera> = cameras
                    .iter()
                    .zip(&km.assignment)
                    .filter(|&(_, &a)| a == j)
                    .map(|(c, _)| c)
                    .collect();
                visibility_filter_chunk(sets, j, levels, &cams, cfg, lod_cfg)
            })
            .collect()
    } else {
        raw.clone()
    };
    let summaries = (0..k)
        .map(|j| ChunkSummary {
            chunk: j,
            center: km.centers[j].into(),
            radius: radii[j],
            camera_count: km.assignment.iter().filter(|&&a| a == j).count(),
            sizes_before: raw[j].iter().map(Vec::len).collect(),
            sizes_after: filtered[j].iter().map(Vec::len).collect(),
        })
        .collect();
    let plan = ChunkPlan {
        centers: km.centers,
        radii,
        active_sets: filtered,
        source_camera_assignment: km.assignment,
    };
    plan.validate(&levels.iter().map(LodLevel::len).collect::<Vec<_>>())?;
    Ok((plan, summaries))
}
