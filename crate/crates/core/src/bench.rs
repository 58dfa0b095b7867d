//! Trajectory playback and per-frame measurements across render modes.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::blend::{self, BlendState, StreamEventKind};
use crate::io::asset::LodAsset;
use crate::lod;
use crate::raster::{self, RasterConfig, TileRenderOutput};
use crate::scene::{Camera, Gaussian};
use crate::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// Default per-pixel visible-count histogram edges.
pub const HISTOGRAM_EDGES: [u32; 10] = [0, 1, 2, 4, 8, 16, 32, 64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// Level 0 only.
    Full,
    /// All levels, selected around the camera.
    Lod,
    /// The nearest chunk's active sets.
    Chunks,
    /// The two nearest chunks with opacity blending.
    Blend,
}

impl RenderMode {
    pub const ALL: [RenderMode; 4] = [RenderMode::Full, RenderMode::Lod, RenderMode::Chunks, RenderMode::Blend];

    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Full => "full",
            RenderMode::Lod => "lod",
            RenderMode::Chunks => "chunks",
            RenderMode::Blend => "blend",
        }
    }
}

impl FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RenderMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown render mode `{s}` (full|lod|chunks|blend)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

/// Parses `"px,py,pz,qw,qx,qy,qz"`. The quaternion must be unit to 1e-6.
pub fn parse_pose(s: &str) -> Result<Pose> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("pose `{s}`: {e}")))?;
    pose_from_values(&v).map_err(|e| Error::InvalidArgument(format!("pose `{s}`: {e}")))
}

fn pose_from_values(v: &[f64]) -> std::result::Result<Pose, String> {
    if v.len() != 7 {
        return Err(format!("expected 7 values, got {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err("values must be finite".into());
    }
    let q = Quaternion::new(v[3], v[4], v[5], v[6]);
    if (q.norm() - 1.0).abs() > crate::scene::UNIT_QUAT_TOL {
        return Err(format!("quaternion norm {} is not 1", q.norm()));
    }
    Ok(Pose { position: Vector3::new(v[0], v[1], v[2]), orientation: UnitQuaternion::from_quaternion(q) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub time: f64,
    pub pose: Pose,
}

/// CSV rows `time,px,py,pz,qw,qx,qy,qz` (optional header), or a cameras JSON
/// file (`.json`) whose entries become records at times 0, 1, 2, ...
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let cams = crate::io::read_cameras_json(path)?;
        return Ok(cams
            .iter()
            .enumerate()
            .map(|(i, c)| TrajectoryRecord {
                time: i as f64,
                pose: Pose { position: c.position, orientation: c.orientation },
            })
            .collect());
    }
    parse_trajectory_csv(&std::fs::read_to_string(path)?)
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let v = match parsed {
            Ok(v) => v,
            Err(_) if out.is_empty() && n == 0 => continue,
            Err(e) => return Err(Error::InvalidArgument(format!("trajectory line {}: {e}", n + 1))),
        };
        if v.len() != 8 {
            return Err(Error::InvalidArgument(format!("trajectory line {}: expected 8 fields", n + 1)));
        }
        let pose = pose_from_values(&v[1..])
            .map_err(|e| Error::InvalidArgument(format!("trajectory line {}: {e}", n + 1)))?;
        out.push(TrajectoryRecord { time: v[0], pose });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("trajectory has no records".into()));
    }
    Ok(out)
}

pub fn trajectory_csv(records: &[TrajectoryRecord]) -> String {
    let mut s = String::from("time,px,py,pz,qw,qx,qy,qz\n");
    for r in records {
        let p = r.pose.position;
        let q = r.pose.orientation.quaternion();
        s.push_str(&format!("{},{},{},{},{},{},{},{}\n", r.time, p.x, p.y, p.z, q.w, q.i, q.j, q.k));
    }
    s
}

/// `steps + 1` evenly spaced records from `start` to `end` at fixed orientation.
pub fn straight_trajectory(
    start: Vector3<f64>,
    end: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
    steps: usize,
) -> Vec<TrajectoryRecord> {
    (0..=steps)
        .map(|k| {
            let s = if steps == 0 { 0.0 } else { k as f64 / steps as f64 };
            TrajectoryRecord { time: k as f64, pose: Pose { position: start + s * (end - start), orientation } }
        })
        .collect()
}

/// Render list for one mode at one camera position. `state` is required for
/// [`RenderMode::Blend`].
pub struct ModeSelection<'a> {
    pub items: Vec<(&'a Gaussian, f64)>,
    pub resident: usize,
}

pub fn select_mode<'a>(
    asset: &'a LodAsset,
    mode: RenderMode,
    position: &Vector3<f64>,
    state: Option<&BlendState>,
) -> Result<ModeSelection<'a>> {
    let levels = &asset.levels;
    match mode {
        RenderMode::Full => Ok(ModeSelection {
            items: levels[0].gaussians.iter().map(|g| (g, 1.0)).collect(),
            resident: levels[0].len(),
        }),
        RenderMode::Lod => {
            let sets = lod::select_active(levels, position, &[])?;
            Ok(ModeSelection { items: lod::gather(levels, &sets), resident: levels.iter().map(|l| l.len()).sum() })
        }
        RenderMode::Chunks => {
            let (primary, _) = blend::nearest_two_chunks(&asset.plan.centers, position);
            let sel = blend::hard_selection(&asset.plan, position);
            Ok(ModeSelection { items: sel.gather(levels), resident: blend::resident_count(&asset.plan, &[primary]) })
        }
        RenderMode::Blend => {
            let owned;
            let state = match state {
                Some(s) => s,
                None => {
                    owned = blend::state_at(&asset.plan, position);
                    &owned
                }
            };
            let sel = blend::blended_selection(&asset.plan, state)?;
            Ok(ModeSelection {
                items: sel.gather(levels),
                resident: blend::resident_count(&asset.plan, &state.loaded_chunks),
            })
        }
    }
}

pub fn render_mode(
    asset: &LodAsset,
    mode: RenderMode,
    cam: &Camera,
    state: Option<&BlendState>,
    cfg: &RasterConfig,
) -> Result<TileRenderOutput> {
    let sel = select_mode(asset, mode, &cam.position, state)?;
    Ok(raster::render_items(&sel.items, cam, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFrame {
    pub mode: RenderMode,
    pub mean_tile_count: f64,
    pub mean_pixel_visible: f64,
    /// Gaussians with at least one visible contribution.
    pub visible_gaussians: usize,
    pub resident: usize,
    /// `None` for the full mode (the reference itself).
    pub psnr_vs_full: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub time: f64,
    pub position: [f64; 3],
    pub loaded_chunks: Vec<usize>,
    pub t: f64,
    pub modes: Vec<ModeFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub event: StreamEventKind,
    pub chunk_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeHistogram {
    pub mode: RenderMode,
    pub edges: Vec<u32>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: RenderMode,
    /// Mean over frames; `None` for the full mode.
    pub psnr_vs_full: Option<f64>,
    pub mean_tile_count: f64,
    pub mean_visible_gaussians: f64,
    pub mean_resident: f64,
    pub max_resident: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub report_version: u32,
    pub scene_gaussians: usize,
    pub chunk_count: usize,
    pub max_pair_union: usize,
    pub modes: Vec<RenderMode>,
    pub frames: Vec<FrameReport>,
    pub events: Vec<EventRecord>,
    pub histograms: Vec<ModeHistogram>,
    pub ablation: Vec<AblationRow>,
}

impl BenchReport {
    pub fn ablation_markdown(&self) -> String {
        let mut s = String::from("| mode | PSNR vs full (dB) | mean per-tile count | #visible | #resident |\n");
        s.push_str("|---|---|---|---|---|\n");
        for r in &self.ablation {
            let psnr = r.psnr_vs_full.map_or("-".to_string(), |p| format!("{p:.2}"));
            s.push_str(&format!(
                "| {} | {} | {:.1} | {:.0} | {:.0} |\n",
                r.mode.name(),
                psnr,
                r.mean_tile_count,
                r.mean_visible_gaussians,
                r.mean_resident
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub modes: Vec<RenderMode>,
    pub raster: RasterConfig,
    pub histogram_edges: Vec<u32>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { modes: RenderMode::ALL.to_vec(), raster: RasterConfig::default(), histogram_edges: HISTOGRAM_EDGES.to_vec() }
    }
}

/// Plays `trajectory` through every requested mode. PSNR is measured against
/// the full render, which is computed even when the full mode is not listed.
pub fn run_bench(asset: &LodAsset, trajectory: &[TrajectoryRecord], opts: &BenchOptions) -> Result<BenchReport> {
    if trajectory.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let mut raster_cfg = opts.raster;
    raster_cfg.track_max_weight = true;
    let mut state = BlendState::empty();
    let mut frames = Vec::with_capacity(trajectory.len());
    let mut events = Vec::new();
    let mut hist: Vec<Vec<u64>> = vec![vec![0; opts.histogram_edges.len()]; opts.modes.len()];
    for (k, rec) in trajectory.iter().enumerate() {
        let cam = asset.render_camera(rec.pose.position, rec.pose.orientation);
        let (next, evs) = blend::stream_step(&state, &asset.plan, &cam.position);
        state = next;
        events.extend(evs.into_iter().map(|e| EventRecord { time: rec.time, event: e.kind, chunk_id: e.chunk_id }));

        let full = render_mode(asset, RenderMode::Full, &cam, None, &raster_cfg)?;
        let mut modes = Vec::with_capacity(opts.modes.len());
        for (mi, &mode) in opts.modes.iter().enumerate() {
            let sel = select_mode(asset, mode, &cam.position, Some(&state))?;
            let out = if mode == RenderMode::Full { None } else { Some(raster::render_items(&sel.items, &cam, &raster_cfg)) };
            let out_ref = out.as_ref().unwrap_or(&full);
            for (h, c) in hist[mi].iter_mut().zip(raster::visibility_histogram(out_ref, &opts.histogram_edges)?) {
                *h += c;
            }
            let visible = out_ref
                .per_gaussian_max_weight
                .as_ref()
                .map_or(0, |w| w.iter().filter(|&&x| x > 0.0).count());
            let npix = out_ref.per_pixel_visible.len().max(1) as f64;
            modes.push(ModeFrame {
                mode,
                mean_tile_count: out_ref.mean_tile_count(),
                mean_pixel_visible: out_ref.per_pixel_visible.iter().map(|&v| v as f64).sum::<f64>() / npix,
                visible_gaussians: visible,
                resident: sel.resident,
                psnr_vs_full: out.as_ref().map(|o| raster::psnr(&o.image, &full.image)),
            });
        }
        frames.push(FrameReport {
            frame: k,
            time: rec.time,
            position: cam.position.into(),
            loaded_chunks: state.loaded_chunks.clone(),
            t: state.t,
            modes,
        });
    }

    let n = frames.len() as f64;
    let ablation = opts
        .modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| {
            let col = || frames.iter().map(move |f| &f.modes[mi]);
            AblationRow {
                mode,
                psnr_vs_full: if mode == RenderMode::Full {
                    None
                } else {
                    Some(col().map(|m| m.psnr_vs_full.unwrap_or(f64::INFINITY)).sum::<f64>() / n)
                },
                mean_tile_count: col().map(|m| m.mean_tile_count).sum::<f64>() / n,
                mean_visible_gaussians: col().map(|m| m.visible_gaussians as f64).sum::<f64>() / n,
                mean_resident: col().map(|m| m.resident as f64).sum::<f64>() / n,
                max_resident: col().map(|m| m.resident).max().unwrap_or(0),
            }
        })
        .collect();
    let histograms = opts
        .modes
        .iter()
        .zip(hist)
        .map(|(&mode, counts)| ModeHistogram { mode, edges: opts.histogram_edges.clone(), counts })
        .collect();
    Ok(BenchReport {
        report_version: REPORT_VERSION,
        scene_gaussians: asset.levels[0].len(),
        chunk_count: asset.plan.len(),
        max_pair_union: blend::max_pair_union(&asset.plan),
        modes: opts.modes.clone(),
        frames,
        events,
        histograms,
        ablation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_parsing() {
        let p = parse_pose("1,2,3,1,0,0,0").unwrap();
        assert_eq!(p.position, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(p.orientation, UnitQuaternion::identity());
        assert!(parse_pose("1,2,3").is_err());
        assert!(parse_pose("1,2,3,0.5,0,0,0").is_err());
        assert!(parse_pose("a,2,3,1,0,0,0").is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let t = straight_trajectory(Vector3::zeros(), Vector3::new(4.0, 0.0, 0.0), UnitQuaternion::identity(), 4);
        assert_eq!(t.len(), 5);
        assert_eq!(t[2].pose.position.x, 2.0);
        let back = parse_trajectory_csv(&trajectory_csv(&t)).unwrap();
        assert_eq!(back, t);
        assert!(parse_trajectory_csv("time,px\n").is_err());
        assert!(parse_trajectory_csv("0,1,2,3,1,0,0,0\nx,1,2,3,1,0,0,0\n").is_err());
    }

    #[test]
    fn mode_names() {
        for m in RenderMode::ALL {
            assert_eq!(m.name().parse::<RenderMode>().unwrap(), m);
        }
        assert!("fast".parse::<RenderMode>().is_err());
    }
}
